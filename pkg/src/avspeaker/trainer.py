"""Optimization loop, early stopping and trial evaluation."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .data import (CorruptionSpec, SpeakerRecord, Trial, corrupt_array, make_trials, sample_batch,
                   split_speakers, total_utterances, utterance_index)
from .losses import (MtlConfig, TripletConfig, aux_age_loss, batch_hard_triplet_loss,
                     ge2e_forward_backward, mtl_loss)
from .metrics import cosine_scores, eer
from .model import Model
from .nn import AdamState, adam_step, clip_global_norm

log = logging.getLogger(__name__)

LOSS_KINDS = ("ge2e_mm", "triplet")
SAMPLINGS = ("unsynchronized", "synchronized")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_speakers_per_batch: int = 32
    utterances_per_speaker: int = 10
    lr_init: float = 1e-3
    lr_decay: float = 0.9
    patience: int = 5
    gamma: float = 0.015
    loss_kind: str = "ge2e_mm"
    sampling: str = "unsynchronized"
    aux_enabled: bool = True
    max_epochs: int = 30
    steps_per_epoch: int = 0  # 0 = ceil(#utterances / (N * M))
    clip_norm: float = 3.0
    triplet_margin: float = 0.2
    exclusive_positive_centroid: bool = False
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.sampling not in SAMPLINGS:
            raise ValueError(f"sampling must be one of {SAMPLINGS}")
        if self.n_speakers_per_batch < 2 or self.utterances_per_speaker < 1:
            raise ValueError("batches need N >= 2 speakers and M >= 1 utterances")
        MtlConfig(self.gamma)
        TripletConfig(self.triplet_margin)

    def lr_at(self, epoch: int) -> float:
        return self.lr_init * self.lr_decay ** epoch


@dataclass
class EpochReport:
    epoch: int
    loss: float
    val_eer: float
    lr: float
    early_stop: bool = False


@dataclass
class TrainState:
    model: Model
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0

    @classmethod
    def fresh(cls, seed: int) -> "TrainState":
        init_ss, sample_ss = np.random.SeedSequence(seed).spawn(2)
        return cls(Model(np.random.default_rng(init_ss)), AdamState(), np.random.default_rng(sample_ss))


def steps_for(dataset: Sequence[SpeakerRecord], cfg: TrainConfig) -> int:
    if cfg.steps_per_epoch > 0:
        return cfg.steps_per_epoch
    return max(1, math.ceil(total_utterances(dataset) / (cfg.n_speakers_per_batch * cfg.utterances_per_speaker)))


def train_step(state: TrainState, batch, cfg: TrainConfig, lr: float) -> float:
    """One forward/backward/update on a sampled batch; returns the objective."""
    model = state.model.train()
    n, m = batch.n_speakers, batch.m_utterances
    fused = model.fusion.forward(batch.audio.reshape(n * m, -1), batch.visual.reshape(n * m, -1))
    emb = fused.reshape(n, m, -1)

    for g in model.gradients().values():
        g[...] = 0.0
    if cfg.loss_kind == "ge2e_mm":
        l_main, d_emb = ge2e_forward_backward(emb, model.ge2e, cfg.exclusive_positive_centroid)
    else:
        l_main, d_emb = batch_hard_triplet_loss(emb, TripletConfig(cfg.triplet_margin))

    if cfg.aux_enabled:
        l_aux, d_aux = aux_age_loss(model.age_head, emb, batch.age_labels)
        loss = mtl_loss(l_main, l_aux, MtlConfig(cfg.gamma))
        d_emb = cfg.gamma * d_emb + (1.0 - cfg.gamma) * d_aux
        for g in model.age_head.gradients().values():
            g *= 1.0 - cfg.gamma
        for g in model.ge2e.grads.values():
            g *= cfg.gamma
    else:
        loss = l_main
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at epoch {state.epoch} step {state.adam.step_count}")

    model.fusion.backward(d_emb.reshape(n * m, -1))
    params = model.parameters()
    grads = model.gradients()
    if cfg.loss_kind != "ge2e_mm":
        grads = {k: v for k, v in grads.items() if not k.startswith("ge2e.")}
    if not cfg.aux_enabled:
        grads = {k: v for k, v in grads.items() if not k.startswith("age.")}
    clip_global_norm(grads, cfg.clip_norm)
    adam_step(state.adam, params, grads, lr)
    model.ge2e.clamp()
    return loss


def train_epoch(state: TrainState, dataset: Sequence[SpeakerRecord], cfg: TrainConfig) -> EpochReport:
    lr = cfg.lr_at(state.epoch)
    losses = []
    for _ in range(steps_for(dataset, cfg)):
        batch = sample_batch(dataset, cfg.n_speakers_per_batch, cfg.utterances_per_speaker,
                             state.rng, cfg.sampling)
        losses.append(train_step(state, batch, cfg, lr))
    report = EpochReport(state.epoch, float(np.mean(losses)), float("nan"), lr)
    state.epoch += 1
    return report


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def embed_records(model: Model, records: Sequence[SpeakerRecord],
                  corruption: Optional[CorruptionSpec] = None, seed: int = 0,
                  chunk: int = 1024) -> np.ndarray:
    """Eval-mode fused embeddings of every utterance, in record order.

    Audio and visual come from the same utterance. A corruption spec is
    applied to every utterance before fusion.
    """
    model.eval()
    audio = np.concatenate([r.audio for r in records])
    visual = np.concatenate([r.visual for r in records])
    if corruption is not None and corruption.mode != "clean":
        rng = np.random.default_rng(seed)
        if corruption.modality == "audio":
            audio = corrupt_array(audio, corruption.mode, corruption.sigma, rng)
        else:
            visual = corrupt_array(visual, corruption.mode, corruption.sigma, rng)
    out = [model.fusion.forward(audio[i:i + chunk], visual[i:i + chunk])
           for i in range(0, audio.shape[0], chunk)]
    return np.concatenate(out)


def score_trials(model: Model, records: Sequence[SpeakerRecord], trials: Sequence[Trial],
                 corruption: Optional[CorruptionSpec] = None, seed: int = 0):
    """Cosine scores of ``trials``; returns ``(labels, scores)`` in trial order."""
    index = utterance_index(records)
    missing = sorted({u for t in trials for u in (t.enroll, t.test) if u not in index})
    if missing:
        shown = ", ".join(missing[:10])
        raise KeyError(f"{len(missing)} trial utterance(s) not in dataset: {shown}")
    emb = embed_records(model, records, corruption, seed)
    offsets = np.cumsum([0] + [r.n_utterances for r in records])
    row = {u: offsets[j] + i for u, (j, i) in index.items()}
    a = emb[[row[t.enroll] for t in trials]]
    b = emb[[row[t.test] for t in trials]]
    labels = np.array([t.label for t in trials])
    return labels, cosine_scores(a, b)


def evaluate_trials(model: Model, records: Sequence[SpeakerRecord], trials: Sequence[Trial],
                    corruption: Optional[CorruptionSpec] = None, seed: int = 0):
    """Returns ``(eer, labels, scores)``."""
    labels, scores = score_trials(model, records, trials, corruption, seed)
    value, _ = eer((labels, scores))
    return value, labels, scores


def validation_split(records: Sequence[SpeakerRecord], cfg: TrainConfig):
    """Hold out ``val_fraction`` of speakers (at least 2) and build balanced trials."""
    n_val = max(2, int(round(cfg.val_fraction * len(records))))
    train, val = split_speakers(records, n_val, cfg.seed)
    return train, val, make_trials(val, cfg.seed)


@dataclass
class FitResult:
    best: Model
    best_epoch: int
    best_val_eer: float
    reports: List[EpochReport] = field(default_factory=list)


def fit(train_records: Sequence[SpeakerRecord], val_records: Sequence[SpeakerRecord],
        val_trials: Sequence[Trial], cfg: TrainConfig, state: Optional[TrainState] = None,
        on_epoch=None) -> FitResult:
    """Train until validation EER stalls for ``patience`` epochs.

    A strictly lower validation EER resets patience. On ties the later
    checkpoint replaces the kept one, so the returned model never has a worse
    validation EER than any observed epoch.
    """
    cfg.validate()
    if not val_trials:
        raise ValueError("validation trial list is empty")
    state = state or TrainState.fresh(cfg.seed)
    best_eer, best_epoch, best_model = math.inf, -1, None
    stale = 0
    reports = []
    for _ in range(cfg.max_epochs):
        report = train_epoch(state, train_records, cfg)
        report.val_eer, _, _ = evaluate_trials(state.model, val_records, val_trials)
        if report.val_eer < best_eer:
            stale = 0
        else:
            stale += 1
        if report.val_eer <= best_eer:
            best_eer, best_epoch = report.val_eer, report.epoch
            best_model = copy.deepcopy(state.model)
        report.early_stop = stale >= cfg.patience
        reports.append(report)
        log.info("epoch %d loss %.5f val_eer %.4f lr %.5f", report.epoch, report.loss,
                 report.val_eer, report.lr)
        if on_epoch is not None:
            on_epoch(report)
        if report.early_stop:
            break
    return FitResult(best_model, best_epoch, best_eer, reports)


def write_training_log(path, reports: Sequence[EpochReport]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,loss,val_eer,lr\n")
        for r in reports:
            fh.write(f"{r.epoch},{r.loss!r},{r.val_eer!r},{r.lr!r}\n")
