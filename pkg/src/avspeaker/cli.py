"""Command-line entry point: ``avspeaker <command> ...``.

Commands: gen-data, train, eval, robustness, gamma-sweep, ablate. Every
command writes a ``run.json`` manifest next to its outputs. Failures exit
with a nonzero status and a one-line JSON error on stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .data import (CorruptionSpec, SynthConfig, dataset_stats, generate_with_heldout,
                   load_embedding_manifest, make_trials, read_trials, write_embedding_manifest, write_trials)
from .experiments import (DEFAULT_SIGMAS, ablation_summary, grid, robustness_sweep, run_ablation,
                          train_model, write_ablation, write_csv, write_run_manifest)
from .metrics import write_scores
from .model import load_checkpoint, save_checkpoint
from .trainer import LOSS_KINDS, SAMPLINGS, TrainConfig, evaluate_trials, write_training_log

class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("UsageError", f"{self.prog}: {message}", 2)


def _fail(kind: str, message: str, code: int = 1):
    sys.stderr.write(json.dumps({"error": kind, "message": " ".join(str(message).split())}) + "\n")
    sys.exit(code)


def sig3(x: float) -> str:
    """Three significant figures, keeping trailing zeros (12.0, 0.374, 0.00)."""
    if x == 0:
        return "0.00"
    return f"{float(f'{x:.3g}'):#.3g}".rstrip(".")


def _csv_floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _csv_ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def _load_configs(args):
    values = cfgmod.read_flat_config(args.config) if getattr(args, "config", None) else {}
    synth, train = cfgmod.split_for(values, SynthConfig(), TrainConfig())
    return synth, train


def _train_config(args) -> TrainConfig:
    _, cfg = _load_configs(args)
    overrides = {
        "loss_kind": args.loss, "sampling": args.sampling, "gamma": args.gamma, "lr_init": args.lr,
        "max_epochs": args.epochs, "n_speakers_per_batch": args.batch_speakers,
        "utterances_per_speaker": args.batch_utterances, "steps_per_epoch": args.steps_per_epoch,
        "patience": args.patience, "seed": args.seed,
    }
    cfg = dataclasses.replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    if args.no_aux:
        cfg = dataclasses.replace(cfg, aux_enabled=False)
    if args.exclusive_centroid:
        cfg = dataclasses.replace(cfg, exclusive_positive_centroid=True)
    cfg.validate()
    return cfg


def _add_train_flags(p):
    p.add_argument("--config", help="flat key = value config file; flags override it")
    p.add_argument("--loss", choices=LOSS_KINDS, help="ge2e_mm (default) or the triplet baseline")
    p.add_argument("--sampling", choices=SAMPLINGS,
                   help="unsynchronized pairs audio and visual from different utterances (default)")
    p.add_argument("--gamma", type=float,
                   help="weight of the metric loss in gamma*L_G + (1-gamma)*L_AUX (default 0.015); "
                        "1 keeps only the metric loss, 0 only the age loss")
    p.add_argument("--no-aux", action="store_true", help="drop the age head entirely (pure metric learning)")
    p.add_argument("--lr", type=float, help="initial learning rate, decayed by 0.9 per epoch")
    p.add_argument("--epochs", type=int, help="maximum number of epochs")
    p.add_argument("--batch-speakers", type=int, help="speakers per batch (N)")
    p.add_argument("--batch-utterances", type=int, help="utterances per speaker (M)")
    p.add_argument("--steps-per-epoch", type=int, help="batches per epoch; 0 derives it from the data size")
    p.add_argument("--patience", type=int, help="early stopping patience in epochs")
    p.add_argument("--exclusive-centroid", action="store_true",
                   help="leave the query out of its own speaker centroid")
    p.add_argument("--seed", type=int, help="training seed")


def _load_records(path):
    records = load_embedding_manifest(path)
    if not records:
        raise CliError(f"{path}: manifest has no utterances")
    return records


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    synth, _ = _load_configs(args)
    overrides = {"n_speakers": args.speakers, "utterances_per_speaker": args.utterances,
                 "label_coverage": args.label_coverage, "intra_spread": args.spread, "seed": args.seed}
    synth = dataclasses.replace(synth, **{k: v for k, v in overrides.items() if v is not None})
    synth.validate()
    if args.heldout < 0:
        raise CliError("--heldout must be non-negative")
    train, test = generate_with_heldout(synth, args.heldout)
    out = Path(args.out)
    outputs = {"train_manifest": str(write_embedding_manifest(train, out / "train"))}
    if test:
        outputs["heldout_manifest"] = str(write_embedding_manifest(test, out / "heldout"))
        trials = make_trials(test, synth.seed, balanced=(args.trial_mode == "balanced"))
        write_trials(trials, out / "heldout" / "trials.txt")
        outputs["heldout_trials"] = str(out / "heldout" / "trials.txt")
    write_run_manifest(out / "run.json", "gen-data",
                       {**dataclasses.asdict(synth), "heldout": args.heldout, "trial_mode": args.trial_mode},
                       synth.seed, [args.config] if args.config else [], outputs)
    for name, recs in (("train", train), ("heldout", test)):
        if recs:
            stats = dataset_stats(recs)
            print(f"{name}: " + " ".join(f"{k}={v}" for k, v in stats.items()))
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    records = _load_records(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train_model(records, cfg)
    save_checkpoint(result.best, out / "checkpoint.bin")
    write_training_log(out / "train_log.csv", result.reports)
    write_run_manifest(out / "run.json", "train", dataclasses.asdict(cfg), cfg.seed,
                       [args.data, Path(args.data).parent / "blobs"],
                       {"checkpoint": str(out / "checkpoint.bin"), "log": str(out / "train_log.csv")})
    print(f"epochs {len(result.reports)} best_epoch {result.best_epoch} "
          f"val_EER {sig3(100 * result.best_val_eer)}%")
    return 0


def _parse_corrupt(values):
    if not values:
        return None
    if len(values) not in (2, 3):
        raise CliError("--corrupt takes MODALITY MODE [SIGMA]")
    sigma = float(values[2]) if len(values) == 3 else 0.0
    return CorruptionSpec(values[0], values[1], sigma)


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = _load_records(args.data)
    trials = read_trials(args.trials)
    spec = _parse_corrupt(args.corrupt)
    value, labels, scores = evaluate_trials(model, records, trials, spec, args.seed)
    outputs = {}
    if args.scores:
        write_scores(args.scores, labels, scores)
        outputs["scores"] = args.scores
    if args.manifest:
        write_run_manifest(args.manifest, "eval",
                           {"corrupt": args.corrupt or [], "checkpoint": args.checkpoint}, args.seed,
                           [args.checkpoint, args.data, args.trials], outputs)
    print(f"EER {sig3(100 * value)}%")
    return 0


def cmd_robustness(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = _load_records(args.data)
    trials = read_trials(args.trials)
    modalities = ("audio", "visual") if args.modality == "both" else (args.modality,)
    rows = robustness_sweep(model, records, trials, _csv_floats(args.sigmas), modalities, args.seed)
    write_csv(args.out, ["modality", "mode", "sigma", "eer"], rows)
    for modality, mode, sigma, value in rows:
        print(f"{modality:6s} {mode:7s} sigma={sigma:<6g} EER {sig3(100 * value)}%")
    return 0


def cmd_gamma_sweep(args) -> int:
    base = _train_config(args)
    records = _load_records(args.data)
    test = _load_records(args.test_data)
    trials = read_trials(args.trials)
    rows = []
    for gamma in _csv_floats(args.gammas):
        cfg = dataclasses.replace(base, gamma=gamma, aux_enabled=True)
        cfg.validate()
        result = train_model(records, cfg)
        value, _, _ = evaluate_trials(result.best, test, trials)
        rows.append((gamma, result.best_epoch, float(result.best_val_eer), float(value)))
        print(f"gamma {gamma:<8g} test EER {sig3(100 * value)}%")
    write_csv(args.out, ["gamma", "best_epoch", "val_eer", "test_eer"], rows)
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args)
    data_dir = Path(args.data_dir)
    train = _load_records(data_dir / "train" / "manifest.csv")
    test = _load_records(data_dir / "heldout" / "manifest.csv")
    trials = read_trials(data_dir / "heldout" / "trials.txt")
    aux = [{"on": True, "off": False}[v] for v in args.aux.split(",")]
    arms = grid(args.losses.split(","), aux, args.samplings.split(","))
    for arm in arms:
        arm.apply(base, 0).validate()
    seeds = _csv_ints(args.seeds)
    if not seeds:
        raise CliError("--seeds must list at least one seed")
    results = run_ablation(arms, train, test, trials, base, seeds)
    out = Path(args.out)
    paths = write_ablation(results, out)
    write_run_manifest(out / "run.json", "ablate",
                       {**dataclasses.asdict(base), "losses": args.losses, "aux": args.aux,
                        "samplings": args.samplings, "seeds": seeds},
                       seeds[0], [data_dir / "train", data_dir / "heldout"], paths)
    print(f"{'configuration':36s} {'EER %':>8s} {'silhouette':>11s} {'CH':>10s} {'DB':>8s}")
    for r in results:
        idx = r.mean_indices()
        print(f"{r.arm.key:36s} {sig3(100 * r.mean_eer):>8s} {idx['silhouette']:11.4f} "
              f"{idx['calinski_harabasz']:10.2f} {idx['davies_bouldin']:8.4f}")
    for line in ablation_summary(results):
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="avspeaker", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic embedding dataset",
                       description="Synthesize speakers with 256-d audio and 512-d visual embeddings. "
                                   "By default 50 training speakers x 10 utterances, 80%% of speakers "
                                   "carrying an age label (about 5000 of 6112 speakers in the large "
                                   "corpus this mimics have one), plus held-out speakers with a trial list.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--speakers", type=int, help="training speakers (default 50)")
    p.add_argument("--utterances", type=int, help="utterances per speaker (default 10)")
    p.add_argument("--label-coverage", type=float, help="fraction of speakers with an age label (default 0.8)")
    p.add_argument("--spread", type=float, help="within-speaker noise scale (default 0.05)")
    p.add_argument("--heldout", type=int, default=20, help="extra held-out speakers (default 20)")
    p.add_argument("--trial-mode", choices=("all", "balanced"), default="all",
                   help="held-out trials: every utterance pair, or all targets plus as many nontargets")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a fusion model")
    p.add_argument("--data", required=True, help="training manifest.csv")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trial list and report the EER")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="manifest.csv holding every trial utterance")
    p.add_argument("--trials", required=True)
    p.add_argument("--corrupt", nargs="+", metavar="ARG",
                   help="MODALITY MODE [SIGMA], e.g. 'audio missing' or 'visual awgn 0.5'")
    p.add_argument("--scores", help="write label,score CSV here")
    p.add_argument("--manifest", help="write a run manifest here")
    p.add_argument("--seed", type=int, default=0, help="noise seed for awgn")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="clean / missing / awgn sigma sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="CSV with one row per condition")
    p.add_argument("--modality", choices=("audio", "visual", "both"), default="both")
    p.add_argument("--sigmas", default=",".join(str(s) for s in DEFAULT_SIGMAS))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("gamma-sweep", help="train once per gamma and report held-out EER")
    p.add_argument("--data", required=True, help="training manifest.csv")
    p.add_argument("--test-data", required=True, help="held-out manifest.csv")
    p.add_argument("--trials", required=True)
    p.add_argument("--gammas", default="0.001,0.015,0.1,0.5,1.0")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_gamma_sweep)

    p = sub.add_parser("ablate", help="train the loss x aux x sampling grid and compare",
                       description="Train every configuration of the grid on DATA_DIR/train, evaluate on "
                                   "DATA_DIR/heldout, and write eer_table.csv, cluster_indices.csv, "
                                   "histograms/*.csv and summary.txt.")
    p.add_argument("--data-dir", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True)
    p.add_argument("--losses", default="ge2e_mm,triplet")
    p.add_argument("--aux", default="on,off")
    p.add_argument("--samplings", default="unsynchronized,synchronized")
    p.add_argument("--seeds", default="0,1,2")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (KeyError, ValueError, OSError, RuntimeError, CliError) as exc:
        message = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        _fail(type(exc).__name__, message)
    return 1


if __name__ == "__main__":
    sys.exit(main())
