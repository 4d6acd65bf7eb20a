"""Experiment drivers shared by the CLI and the acceptance suite.

Everything here is a deterministic function of its inputs and seeds, and all
files are written with ``repr`` floats, so reruns produce identical bytes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .data import CorruptionSpec, SpeakerRecord, Trial
from .metrics import DistanceDistributions, cluster_indices, distance_distributions, write_histogram
from .model import Model
from .trainer import FitResult, TrainConfig, embed_records, evaluate_trials, fit, validation_split

log = logging.getLogger(__name__)

INDEX_NAMES = ("silhouette", "calinski_harabasz", "davies_bouldin")
DEFAULT_SIGMAS = (0.0, 0.05, 0.1, 0.2, 0.5, 1.0)


@dataclass(frozen=True)
class Arm:
    loss_kind: str
    aux_enabled: bool
    sampling: str

    @property
    def key(self) -> str:
        return f"{self.loss_kind}-{'aux' if self.aux_enabled else 'noaux'}-{self.sampling}"

    def apply(self, cfg: TrainConfig, seed: int) -> TrainConfig:
        return dataclasses.replace(cfg, loss_kind=self.loss_kind, aux_enabled=self.aux_enabled,
                                   sampling=self.sampling, seed=seed)


@dataclass
class ArmResult:
    arm: Arm
    seeds: List[int]
    eers: List[float]
    indices: List[Dict[str, float]]
    dists: DistanceDistributions

    @property
    def mean_eer(self) -> float:
        return float(np.mean(self.eers))

    def mean_indices(self) -> Dict[str, float]:
        return {k: float(np.mean([d[k] for d in self.indices])) for k in INDEX_NAMES}


def grid(losses: Iterable[str], aux: Iterable[bool], samplings: Iterable[str]) -> List[Arm]:
    return [Arm(l, a, s) for l in losses for a in aux for s in samplings]


def train_model(train_records: Sequence[SpeakerRecord], cfg: TrainConfig) -> FitResult:
    """Carve a validation split out of ``train_records`` and run :func:`fit`."""
    train, val, val_trials = validation_split(train_records, cfg)
    return fit(train, val, val_trials, cfg)


def speaker_labels(records: Sequence[SpeakerRecord]) -> np.ndarray:
    return np.repeat(np.arange(len(records)), [r.n_utterances for r in records])


def reference_speaker(records: Sequence[SpeakerRecord], seed: int) -> int:
    """A seeded random speaker with at least two utterances."""
    eligible = [j for j, r in enumerate(records) if r.n_utterances >= 2]
    return eligible[int(np.random.default_rng(seed).integers(len(eligible)))]


def embedding_report(model: Model, records: Sequence[SpeakerRecord], reference: int):
    """Cluster indices over all utterances and the distance distributions of one speaker."""
    emb = embed_records(model, records)
    idx = cluster_indices(emb, speaker_labels(records))
    bounds = np.cumsum([0] + [r.n_utterances for r in records])
    groups = [emb[bounds[j]:bounds[j + 1]] for j in range(len(records))]
    return idx, distance_distributions(groups, reference)


def run_arm(arm: Arm, train: Sequence[SpeakerRecord], test: Sequence[SpeakerRecord],
            trials: Sequence[Trial], base: TrainConfig, seeds: Sequence[int],
            reference: int) -> ArmResult:
    eers, indices, dists = [], [], None
    for seed in seeds:
        result = train_model(train, arm.apply(base, seed))
        value, _, _ = evaluate_trials(result.best, test, trials)
        idx, d = embedding_report(result.best, test, reference)
        log.info("%s seed %d: eer %.5f best epoch %d", arm.key, seed, value, result.best_epoch)
        eers.append(value)
        indices.append(idx)
        dists = dists or d
    return ArmResult(arm, list(seeds), eers, indices, dists)


def run_ablation(arms: Sequence[Arm], train, test, trials, base: TrainConfig,
                 seeds: Sequence[int], reference: Optional[int] = None) -> List[ArmResult]:
    if reference is None:
        reference = reference_speaker(test, seeds[0])
    return [run_arm(arm, train, test, trials, base, seeds, reference) for arm in arms]


def direction_check(ge2e: Dict[str, float], triplet: Dict[str, float]) -> Dict[str, bool]:
    """Silhouette and CH should be higher and DB lower for the GE2E model."""
    return {"silhouette": ge2e["silhouette"] > triplet["silhouette"],
            "calinski_harabasz": ge2e["calinski_harabasz"] > triplet["calinski_harabasz"],
            "davies_bouldin": ge2e["davies_bouldin"] < triplet["davies_bouldin"]}


def relative_gain(eer_unsync: float, eer_sync: float) -> Optional[float]:
    """Relative EER reduction of unsynchronized over synchronized sampling, in percent."""
    if eer_sync == 0.0:
        return None
    return 100.0 * (eer_sync - eer_unsync) / eer_sync


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def ablation_summary(results: Sequence[ArmResult]) -> List[str]:
    """Human-readable comparison lines: index directions and sampling effect."""
    by_key = {(r.arm.loss_kind, r.arm.aux_enabled, r.arm.sampling): r for r in results}
    lines = []
    for (loss, aux, sampling), r in sorted(by_key.items()):
        if loss != "ge2e_mm" or ("triplet", aux, sampling) not in by_key:
            continue
        other = by_key[("triplet", aux, sampling)]
        checks = direction_check(r.mean_indices(), other.mean_indices())
        tag = f"{'aux' if aux else 'noaux'}-{sampling}"
        for name, ok in checks.items():
            lines.append(f"direction {tag} {name}: {'PASS' if ok else 'FAIL'} "
                         f"(ge2e_mm {r.mean_indices()[name]:.6g} vs triplet {other.mean_indices()[name]:.6g})")
    for (loss, aux, sampling), r in sorted(by_key.items()):
        if sampling != "unsynchronized" or (loss, aux, "synchronized") not in by_key:
            continue
        sync = by_key[(loss, aux, "synchronized")]
        gain = relative_gain(r.mean_eer, sync.mean_eer)
        shown = "n/a (synchronized EER is 0)" if gain is None else f"{gain:.3g}%"
        lines.append(f"sampling {loss}-{'aux' if aux else 'noaux'}: unsynchronized EER {r.mean_eer:.6g} "
                     f"vs synchronized {sync.mean_eer:.6g}, relative reduction {shown}")
    return lines


def write_ablation(results: Sequence[ArmResult], out_dir) -> Dict[str, str]:
    out = Path(out_dir)
    (out / "histograms").mkdir(parents=True, exist_ok=True)
    seeds = results[0].seeds if results else []
    write_csv(out / "eer_table.csv",
              ["loss_kind", "aux", "sampling"] + [f"eer_seed{s}" for s in seeds] + ["eer_mean"],
              ([r.arm.loss_kind, int(r.arm.aux_enabled), r.arm.sampling, *map(float, r.eers), r.mean_eer]
               for r in results))
    write_csv(out / "cluster_indices.csv", ["loss_kind", "aux", "sampling", *INDEX_NAMES],
              ([r.arm.loss_kind, int(r.arm.aux_enabled), r.arm.sampling,
                *(r.mean_indices()[k] for k in INDEX_NAMES)] for r in results))
    paths = {"eer_table": str(out / "eer_table.csv"), "cluster_indices": str(out / "cluster_indices.csv")}
    for r in results:
        p = out / "histograms" / f"{r.arm.key}.csv"
        write_histogram(p, r.dists)
        paths[f"histogram:{r.arm.key}"] = str(p)
    (out / "summary.txt").write_text("\n".join(ablation_summary(results)) + "\n", encoding="utf-8")
    paths["summary"] = str(out / "summary.txt")
    return paths


def robustness_sweep(model: Model, records, trials, sigmas: Sequence[float] = DEFAULT_SIGMAS,
                     modalities: Sequence[str] = ("audio", "visual"), seed: int = 0) -> List[tuple]:
    """Rows ``(modality, mode, sigma, eer)``: clean, missing, then one awgn row per sigma."""
    rows = []
    for modality in modalities:
        specs = [CorruptionSpec(modality, "clean"), CorruptionSpec(modality, "missing")]
        specs += [CorruptionSpec(modality, "awgn", float(s)) for s in sigmas]
        for spec in specs:
            value, _, _ = evaluate_trials(model, records, trials, spec, seed)
            rows.append((modality, spec.mode, float(spec.sigma), float(value)))
    return rows


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_inputs(paths: Iterable) -> Dict[str, str]:
    """Blob hash of every file, walking directories in sorted order."""
    out = {}
    for p in map(Path, paths):
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            out[str(f)] = git_blob_hash(f.read_bytes())
    return out


def write_run_manifest(path, command: str, config: dict, seed: int, inputs: Iterable,
                       outputs: Dict[str, str]) -> dict:
    """Record what produced a run: config snapshot, seed, input hashes, output paths.

    ``content_hash`` hashes the input listing together with the config, the
    way a git tree hashes its entries.
    """
    hashes = hash_inputs(inputs)
    listing = "".join(f"{h} {name}\n" for name, h in sorted(hashes.items()))
    listing += json.dumps(config, sort_keys=True)
    manifest = {"command": command, "config": config, "seed": seed, "inputs": hashes,
                "content_hash": git_blob_hash(listing.encode("utf-8")), "outputs": outputs}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
