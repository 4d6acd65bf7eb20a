"""Speaker embedding datasets: synthesis, manifest IO, batch sampling,
modality corruption and trial lists.

A dataset is a list of :class:`SpeakerRecord`. Each record keeps its
utterances as two aligned arrays (audio ``(U, 256)`` and visual ``(U, 512)``)
so batches can be gathered with fancy indexing.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .nn import sigmoid

AUDIO_DIM = 256
VISUAL_DIM = 512
MANIFEST_HEADER = ["speaker_id", "utterance_id", "audio_path", "visual_path", "age"]

# logistic approximation of the standard normal CDF: sigmoid(1.702 z) ~ Phi(z)
_PROBIT_SCALE = 1.702


class ManifestError(ValueError):
    pass


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class UtterancePair:
    speaker_id: str
    utterance_id_audio: str
    utterance_id_visual: str
    audio_emb: np.ndarray
    visual_emb: np.ndarray


@dataclass
class SpeakerRecord:
    speaker_id: str
    utterance_ids: List[str]
    audio: np.ndarray
    visual: np.ndarray
    age_label: Optional[float] = None

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.visual = np.asarray(self.visual, dtype=np.float64)
        n = len(self.utterance_ids)
        if n < 1:
            raise ValueError(f"speaker {self.speaker_id} has no utterances")
        if self.audio.shape[0] != n or self.visual.shape[0] != n:
            raise ValueError(f"speaker {self.speaker_id}: embedding rows do not match utterance ids")
        if self.age_label is not None and not 0.0 <= self.age_label <= 1.0:
            raise ValueError(f"speaker {self.speaker_id}: age label {self.age_label} outside [0, 1]")

    @property
    def n_utterances(self) -> int:
        return len(self.utterance_ids)

    def pair(self, audio_idx: int, visual_idx: int) -> UtterancePair:
        return UtterancePair(self.speaker_id, self.utterance_ids[audio_idx],
                             self.utterance_ids[visual_idx], self.audio[audio_idx],
                             self.visual[visual_idx])


@dataclass
class Batch:
    """``N`` speakers by ``M`` utterance pairs, stored as dense arrays.

    ``audio`` is ``(N, M, 256)``, ``visual`` is ``(N, M, 512)``; ``age_labels``
    holds NaN for speakers without a label. ``synchronized`` flags speakers
    whose pairs had to share one utterance.
    """
    speaker_ids: List[str]
    audio: np.ndarray
    visual: np.ndarray
    audio_utt_ids: List[List[str]]
    visual_utt_ids: List[List[str]]
    age_labels: np.ndarray
    synchronized: np.ndarray

    @property
    def n_speakers(self) -> int:
        return len(self.speaker_ids)

    @property
    def m_utterances(self) -> int:
        return self.audio.shape[1]

    @property
    def pairs(self) -> List[List[UtterancePair]]:
        return [[UtterancePair(s, self.audio_utt_ids[j][i], self.visual_utt_ids[j][i],
                               self.audio[j, i], self.visual[j, i])
                 for i in range(self.m_utterances)]
                for j, s in enumerate(self.speaker_ids)]


@dataclass(frozen=True)
class CorruptionSpec:
    modality: str = "audio"
    mode: str = "clean"
    sigma: float = 0.0

    def __post_init__(self):
        if self.modality not in ("audio", "visual"):
            raise ValueError(f"modality must be audio or visual, got {self.modality!r}")
        if self.mode not in ("clean", "missing", "awgn"):
            raise ValueError(f"mode must be clean, missing or awgn, got {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


@dataclass
class SynthConfig:
    n_speakers: int = 50
    utterances_per_speaker: int = 10
    intra_spread: float = 0.05
    label_coverage: float = 0.8
    age_noise: float = 0.1
    seed: int = 0
    id_offset: int = 0

    def validate(self) -> None:
        if self.n_speakers < 2:
            raise ValueError("n_speakers must be at least 2")
        if self.utterances_per_speaker < 2:
            raise ValueError("utterances_per_speaker must be at least 2")
        if self.intra_spread < 0:
            raise ValueError("intra_spread must be non-negative")
        if not 0.0 <= self.label_coverage <= 1.0:
            raise ValueError("label_coverage must lie in [0, 1]")
        if self.age_noise < 0:
            raise ValueError("age_noise must be non-negative")


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_synthetic_dataset(cfg: SynthConfig) -> List[SpeakerRecord]:
    """Draw a separable speaker population on the audio and visual unit spheres.

    Each speaker owns one anchor per modality; utterances are the anchor plus
    isotropic Gaussian noise, renormalized. Ages come from a fixed random
    projection of the concatenated anchors pushed through a logistic CDF, so
    they are roughly uniform on [0, 1] and learnable from the embeddings.
    """
    cfg.validate()
    anchor_ss, noise_ss, age_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    anchor_rng = np.random.default_rng(anchor_ss)
    noise_rng = np.random.default_rng(noise_ss)
    age_rng = np.random.default_rng(age_ss)

    n, u = cfg.n_speakers, cfg.utterances_per_speaker
    audio_anchor = _unit_rows(anchor_rng.standard_normal((n, AUDIO_DIM)))
    visual_anchor = _unit_rows(anchor_rng.standard_normal((n, VISUAL_DIM)))

    projection = age_rng.standard_normal(AUDIO_DIM + VISUAL_DIM)
    # projection of two unit anchors has variance 2 under a standard-normal direction
    z = (np.concatenate([audio_anchor, visual_anchor], axis=1) @ projection) / math.sqrt(2.0)
    z = z + cfg.age_noise * age_rng.standard_normal(n)
    ages = sigmoid(_PROBIT_SCALE * z)
    n_labeled = int(round(cfg.label_coverage * n))
    labeled = np.zeros(n, dtype=bool)
    labeled[age_rng.permutation(n)[:n_labeled]] = True

    records = []
    for k in range(n):
        a_noise = noise_rng.standard_normal((u, AUDIO_DIM))
        v_noise = noise_rng.standard_normal((u, VISUAL_DIM))
        audio = _unit_rows(audio_anchor[k] + cfg.intra_spread * a_noise)
        visual = _unit_rows(visual_anchor[k] + cfg.intra_spread * v_noise)
        sid = f"id{cfg.id_offset + k:05d}"
        records.append(SpeakerRecord(
            speaker_id=sid,
            utterance_ids=[f"{sid}/{i:05d}" for i in range(u)],
            audio=audio,
            visual=visual,
            age_label=float(ages[k]) if labeled[k] else None,
        ))
    return records


def generate_with_heldout(cfg: SynthConfig, n_heldout: int):
    """Training speakers from ``cfg`` plus an independent held-out population.

    Held-out speakers use their own seed stream and ids continuing after the
    training ids, so label coverage applies to each set separately.
    """
    train = generate_synthetic_dataset(cfg)
    if n_heldout == 0:
        return train, []
    seed = int(np.random.SeedSequence([cfg.seed, 1]).generate_state(1)[0])
    held = generate_synthetic_dataset(replace(cfg, n_speakers=n_heldout, seed=seed,
                                              id_offset=cfg.id_offset + cfg.n_speakers))
    return train, held


def split_speakers(records: Sequence[SpeakerRecord], n_holdout: int, seed: int):
    """Deterministically move ``n_holdout`` speakers into a second list."""
    if not 0 <= n_holdout < len(records):
        raise ValueError(f"cannot hold out {n_holdout} of {len(records)} speakers")
    order = np.random.default_rng(seed).permutation(len(records))
    held = set(order[:n_holdout].tolist())
    keep = [r for i, r in enumerate(records) if i not in held]
    out = [r for i, r in enumerate(records) if i in held]
    return keep, out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

def _pick_speakers(dataset: Sequence[SpeakerRecord], n: int, rng: np.random.Generator):
    if n > len(dataset):
        raise SamplingError(f"batch needs {n} speakers but the dataset has {len(dataset)}")
    if len(dataset) == 0:
        raise SamplingError("empty dataset")
    return rng.choice(len(dataset), size=n, replace=False)


def _pick_utterances(n_utts: int, m: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(n_utts, size=m, replace=n_utts < m)


def _assemble(dataset, chosen, audio_idx, visual_idx, synced) -> Batch:
    recs = [dataset[c] for c in chosen]
    audio = np.stack([r.audio[ai] for r, ai in zip(recs, audio_idx)])
    visual = np.stack([r.visual[vi] for r, vi in zip(recs, visual_idx)])
    ages = np.array([np.nan if r.age_label is None else r.age_label for r in recs])
    return Batch(
        speaker_ids=[r.speaker_id for r in recs],
        audio=audio,
        visual=visual,
        audio_utt_ids=[[r.utterance_ids[i] for i in ai] for r, ai in zip(recs, audio_idx)],
        visual_utt_ids=[[r.utterance_ids[i] for i in vi] for r, vi in zip(recs, visual_idx)],
        age_labels=ages,
        synchronized=np.array(synced, dtype=bool),
    )


def sample_batch_unsynchronized(dataset: Sequence[SpeakerRecord], n: int, m: int,
                                rng: np.random.Generator) -> Batch:
    """Sample ``n`` speakers and ``m`` pairs each, with audio and visual taken
    from different utterances of the same speaker.

    A speaker with a single utterance yields synchronized pairs and is flagged.
    """
    chosen = _pick_speakers(dataset, n, rng)
    audio_idx, visual_idx, synced = [], [], []
    for c in chosen:
        u = dataset[c].n_utterances
        ai = _pick_utterances(u, m, rng)
        if u < 2:
            vi = ai.copy()
            synced.append(True)
        else:
            # uniform over the u - 1 other utterances
            offset = rng.integers(1, u, size=m)
            vi = (ai + offset) % u
            synced.append(False)
        audio_idx.append(ai)
        visual_idx.append(vi)
    return _assemble(dataset, chosen, audio_idx, visual_idx, synced)


def sample_batch_synchronized(dataset: Sequence[SpeakerRecord], n: int, m: int,
                              rng: np.random.Generator) -> Batch:
    chosen = _pick_speakers(dataset, n, rng)
    idx = [_pick_utterances(dataset[c].n_utterances, m, rng) for c in chosen]
    return _assemble(dataset, chosen, idx, idx, [True] * len(chosen))


def sample_batch(dataset, n, m, rng, sampling: str = "unsynchronized") -> Batch:
    if sampling == "unsynchronized":
        return sample_batch_unsynchronized(dataset, n, m, rng)
    if sampling == "synchronized":
        return sample_batch_synchronized(dataset, n, m, rng)
    raise ValueError(f"unknown sampling strategy {sampling!r}")


# ---------------------------------------------------------------------------
# Corruption
# ---------------------------------------------------------------------------

def corrupt_array(x: np.ndarray, mode: str, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if mode == "clean":
        return x
    if mode == "missing":
        return np.zeros_like(x)
    if mode == "awgn":
        if sigma == 0:
            return x
        return x + rng.normal(0.0, sigma, size=x.shape)
    raise ValueError(f"unknown corruption mode {mode!r}")


def apply_corruption(pair: UtterancePair, spec: CorruptionSpec,
                     rng: np.random.Generator) -> UtterancePair:
    if spec.mode == "clean":
        return pair
    if spec.modality == "audio":
        return replace(pair, audio_emb=corrupt_array(pair.audio_emb, spec.mode, spec.sigma, rng))
    return replace(pair, visual_emb=corrupt_array(pair.visual_emb, spec.mode, spec.sigma, rng))


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------

def _read_blob(path: Path, dim: int, where: str) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ManifestError(f"{where}: cannot read {path}: {exc.strerror}") from exc
    if len(raw) % 4:
        raise ManifestError(f"{where}: {path} is not a float32 blob ({len(raw)} bytes)")
    values = np.frombuffer(raw, dtype="<f4")
    if values.size != dim:
        raise ManifestError(f"{where}: {path} holds {values.size} values, expected {dim}")
    if not np.all(np.isfinite(values)):
        raise ManifestError(f"{where}: {path} contains non-finite values")
    return values.astype(np.float64)


def load_embedding_manifest(manifest_path) -> List[SpeakerRecord]:
    """Read a manifest CSV and its float32 blobs into speaker records.

    Blob paths are resolved relative to the manifest's directory. An optional
    first line ``# age_range=<min>,<max>`` declares ages in years, mapped
    linearly onto [0, 1]; without it ages must already lie in [0, 1].
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ManifestError(f"{manifest_path}: manifest not found")
    root = manifest_path.parent
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        lines = fh.read().splitlines()

    age_range = None
    start = 0
    if lines and lines[0].startswith("#"):
        text = lines[0][1:].strip()
        if not text.startswith("age_range="):
            raise ManifestError(f"{manifest_path}:1: unrecognized directive {text!r}")
        try:
            lo, hi = (float(v) for v in text.split("=", 1)[1].split(","))
        except ValueError as exc:
            raise ManifestError(f"{manifest_path}:1: malformed age_range") from exc
        if not hi > lo:
            raise ManifestError(f"{manifest_path}:1: age_range max must exceed min")
        age_range = (lo, hi)
        start = 1
    if len(lines) <= start or not lines[start].strip():
        return []

    rows = list(csv.reader(lines[start:]))
    if [h.strip() for h in rows[0]] != MANIFEST_HEADER:
        raise ManifestError(f"{manifest_path}:{start + 1}: header must be {','.join(MANIFEST_HEADER)}")

    speakers: dict = {}
    seen = set()
    for offset, row in enumerate(rows[1:], start=start + 2):
        where = f"{manifest_path}:{offset}"
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"{where}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        spk, utt, apath, vpath, age_txt = (c.strip() for c in row)
        if not spk or not utt:
            raise ManifestError(f"{where}: empty speaker or utterance id")
        key = (spk, utt)
        if key in seen:
            raise ManifestError(f"{where}: duplicate key speaker={spk} utterance={utt}")
        seen.add(key)
        age = None
        if age_txt:
            try:
                age = float(age_txt)
            except ValueError as exc:
                raise ManifestError(f"{where}: age {age_txt!r} is not a number") from exc
            if age_range is not None:
                age = (age - age_range[0]) / (age_range[1] - age_range[0])
            if not 0.0 <= age <= 1.0:
                raise ManifestError(f"{where}: normalized age {age} outside [0, 1]")
        audio = _read_blob(root / apath, AUDIO_DIM, where)
        visual = _read_blob(root / vpath, VISUAL_DIM, where)
        entry = speakers.setdefault(spk, {"utts": [], "audio": [], "visual": [], "age": age,
                                          "line": offset})
        if entry["age"] != age:
            raise ManifestError(f"{where}: age for speaker {spk} disagrees with line {entry['line']}")
        entry["utts"].append(utt)
        entry["audio"].append(audio)
        entry["visual"].append(visual)

    return [SpeakerRecord(spk, e["utts"], np.stack(e["audio"]), np.stack(e["visual"]), e["age"])
            for spk, e in speakers.items()]


def write_embedding_manifest(records: Iterable[SpeakerRecord], out_dir, manifest_name: str = "manifest.csv",
                             blob_dir: str = "blobs") -> Path:
    """Write records as a manifest plus one float32 blob per embedding."""
    out_dir = Path(out_dir)
    (out_dir / blob_dir).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            age = "" if rec.age_label is None else repr(float(rec.age_label))
            for i, utt in enumerate(rec.utterance_ids):
                stem = utt.replace("/", "_")
                apath = f"{blob_dir}/{stem}.audio.f32"
                vpath = f"{blob_dir}/{stem}.visual.f32"
                (out_dir / apath).write_bytes(rec.audio[i].astype("<f4").tobytes())
                (out_dir / vpath).write_bytes(rec.visual[i].astype("<f4").tobytes())
                writer.writerow([rec.speaker_id, utt, apath, vpath, age])
    return manifest


# ---------------------------------------------------------------------------
# Trial lists
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trial:
    label: int
    enroll: str
    test: str


def make_trials(records: Sequence[SpeakerRecord], seed: int,
                max_targets: Optional[int] = None, balanced: bool = True) -> List[Trial]:
    """Trial list over ``records``.

    Balanced lists hold every same-speaker pair (or a sample of
    ``max_targets``) and as many distinct cross-speaker pairs; unbalanced
    lists hold every pair of utterances.
    """
    if not balanced:
        owner = [(r.speaker_id, u) for r in records for u in r.utterance_ids]
        return [Trial(int(owner[a][0] == owner[b][0]), owner[a][1], owner[b][1])
                for a in range(len(owner)) for b in range(a + 1, len(owner))]
    rng = np.random.default_rng(seed)
    targets = [(r.utterance_ids[a], r.utterance_ids[b])
               for r in records
               for a in range(r.n_utterances) for b in range(a + 1, r.n_utterances)]
    if max_targets is not None and len(targets) > max_targets:
        keep = np.sort(rng.choice(len(targets), size=max_targets, replace=False))
        targets = [targets[i] for i in keep]
    owner = [(j, u) for j, r in enumerate(records) for u in r.utterance_ids]
    n_cross = sum(len(owner) - len(r.utterance_ids) for r in records) // 2
    n_non = min(len(targets), n_cross)
    nontargets = set()
    while len(nontargets) < n_non:
        a, b = rng.choice(len(owner), size=2, replace=False)
        if owner[a][0] == owner[b][0]:
            continue
        nontargets.add((min(a, b), max(a, b)))
    trials = [Trial(1, a, b) for a, b in targets]
    trials += [Trial(0, owner[a][1], owner[b][1]) for a, b in sorted(nontargets)]
    return trials


def write_trials(trials: Iterable[Trial], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in trials:
            fh.write(f"{t.label} {t.enroll} {t.test}\n")


def read_trials(path) -> List[Trial]:
    trials = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[0] not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: expected 'label enroll test' with label 0 or 1")
            trials.append(Trial(int(parts[0]), parts[1], parts[2]))
    return trials


def utterance_index(records: Sequence[SpeakerRecord]) -> dict:
    """Map utterance id to ``(record index, row)``."""
    index = {}
    for j, r in enumerate(records):
        for i, u in enumerate(r.utterance_ids):
            index[u] = (j, i)
    return index


def total_utterances(records: Sequence[SpeakerRecord]) -> int:
    return sum(r.n_utterances for r in records)


def dataset_stats(records: Sequence[SpeakerRecord]) -> dict:
    counts = [r.n_utterances for r in records]
    return {
        "speakers": len(records),
        "utterances": int(sum(counts)),
        "min_utterances": int(min(counts)) if counts else 0,
        "max_utterances": int(max(counts)) if counts else 0,
        "labeled_speakers": sum(r.age_label is not None for r in records),
    }

