"""Command-line entry point: corpus / train / eval / gradcheck / report.

Every subcommand validates its inputs up front, refuses to overwrite outputs
unless --force is given, writes everything under the run directory
(--run-dir, defaulting to $EXUNET_RUN_DIR), and exits nonzero with a single
`error: <reason>` line on stderr when anything fails.
"""

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import report as report_mod
from .frontend import DEFAULT_FRONTEND
from .netcore import EXUNET_L_WIDTH_SCALE, build_model, count_params
from .trainer import TrainConfig, grad_check, loss_terms_for, train

DEFAULT_SNR_GRID = (0.0, 5.0, 10.0, 15.0, 20.0)


class CliError(Exception):
    pass


def _default_run_dir():
    return os.environ.get("EXUNET_RUN_DIR", "runs")


def _ensure_writable(path, force):
    if os.path.exists(path) and not force:
        raise CliError(f"refusing to overwrite {path} (use --force)")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


# ---------------------------------------------------------------------------
# config files: flat `key = value` lines, keys from TrainConfig


_TUPLE_KEYS = {"widths", "loss_weights"}
_BOOL_KEYS = {"augment_noise", "mse_literal"}


def parse_config_file(path) -> dict:
    fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in fields:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value, path, lineno)
    return out


def _coerce(key, value, path, lineno):
    try:
        if key in _TUPLE_KEYS:
            return tuple(float(v) if "." in v else int(v) for v in value.split(","))
        if key in _BOOL_KEYS:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if key in ("mode", "lr_decay_mode"):
            return value
        field_type = {f.name: f for f in dataclasses.fields(TrainConfig)}[key]
        default = field_type.default
        return type(default)(value) if default is not None else value
    except (TypeError, ValueError):
        raise CliError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from None


# ---------------------------------------------------------------------------
# corpus


def cmd_corpus(args):
    out = args.out
    os.makedirs(out, exist_ok=True)
    manifest_path = os.path.join(out, "manifest.json")
    _ensure_writable(manifest_path, args.force)
    if args.eval_utts < 2:
        raise CliError("--eval-utts must be at least 2 (trial pairing)")
    kinds = tuple(args.noise_kinds.split(","))

    train_manifest = corpus_mod.synth_speaker_corpus(
        args.n_speakers, args.utts_per_speaker, args.duration, args.seed
    )
    eval_manifest = corpus_mod.synth_speaker_corpus(
        args.n_speakers,
        args.eval_utts,
        args.duration,
        args.seed,
        first_utterance_index=args.utts_per_speaker,
    )

    pool = corpus_mod.synth_noise_pool(
        args.noise_clips, args.noise_duration, args.seed, kinds
    )
    records = [
        corpus_mod.NoiseRecord(
            id=f"n{i:03d}",
            kind=w.noise_kind,
            duration_s=args.noise_duration,
            seed=[args.seed, 77, i],
            path=f"wav/n{i:03d}.wav",
        )
        for i, w in enumerate(pool)
    ]
    train_recs, test_recs = corpus_mod.split_noise_pool(
        records, args.noise_test_fraction, args.seed
    )
    for m in (train_manifest, eval_manifest):
        m.noises = records
        m.noise_train = [r.id for r in train_recs]
        m.noise_test = [r.id for r in test_recs]

    corpus_mod.save_manifest(train_manifest, manifest_path)
    corpus_mod.save_manifest(eval_manifest, os.path.join(out, "manifest_eval.json"))

    eval_utts = [
        (corpus_mod.utterance_key(u.speaker_id, u.utterance_index), u.speaker_id)
        for u in eval_manifest.utterances
    ]
    trials = metrics_mod.make_trials(
        eval_utts, seed=args.seed, max_nontargets=args.max_nontargets
    )
    metrics_mod.save_trials(os.path.join(out, "trials.txt"), trials)

    n_wavs = 0
    if not args.no_audio:
        os.makedirs(os.path.join(out, "wav"), exist_ok=True)
        for m in (train_manifest, eval_manifest):
            src = corpus_mod.CorpusAudioSource(m, root=None)
            for u in m.utterances:
                key = corpus_mod.utterance_key(u.speaker_id, u.utterance_index)
                corpus_mod.write_wav(os.path.join(out, u.path), src.utterance(key))
                n_wavs += 1
        src = corpus_mod.CorpusAudioSource(train_manifest, root=None)
        for rec in records:
            corpus_mod.write_wav(os.path.join(out, rec.path), src.noise(rec.id))
            n_wavs += 1
    print(
        f"corpus: {args.n_speakers} speakers, "
        f"{len(train_manifest.utterances)} train + {len(eval_manifest.utterances)} "
        f"eval utterances, {len(records)} noise clips "
        f"({len(train_recs)} train / {len(test_recs)} test), "
        f"{len(trials)} trials, {n_wavs} wav files -> {out}"
    )


# ---------------------------------------------------------------------------
# train


def cmd_train(args):
    run_dir = args.run_dir
    os.makedirs(run_dir, exist_ok=True)
    ckpt_path = os.path.join(run_dir, "checkpoint.ckpt")
    if args.resume is None:
        _ensure_writable(ckpt_path, args.force)

    overrides = {}
    if args.config:
        overrides.update(parse_config_file(args.config))
    mode = args.mode if args.mode is not None else overrides.get("mode", "baseline")
    if mode == "exunet-l":
        overrides["mode"] = "exunet"
        overrides["width_scale"] = EXUNET_L_WIDTH_SCALE
    else:
        overrides["mode"] = mode
    for key, value in (
        ("seed", args.seed),
        ("epochs", args.epochs),
        ("n_speakers_per_batch", args.batch_speakers),
        ("crop_frames", args.crop_frames),
        ("checkpoint_every", args.checkpoint_every),
        ("num_threads", args.threads),
    ):
        if value is not None:
            overrides[key] = value
    if args.no_augment:
        overrides["augment_noise"] = False
    try:
        cfg = TrainConfig(**overrides)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid training configuration: {e}") from None

    manifest = corpus_mod.load_manifest(os.path.join(args.corpus, "manifest.json"))
    source = corpus_mod.CorpusAudioSource(manifest, root=args.corpus)

    probe = build_model(
        dataclasses.replace(
            _model_cfg_probe(cfg), n_speakers=len(manifest.speakers)
        )
    )
    print(f"mode={cfg.mode} width_scale={cfg.width_scale} "
          f"parameters={count_params(probe):,d}")

    _write_json(
        os.path.join(run_dir, "train_config.json"),
        dataclasses.asdict(cfg)
        | {"widths": list(cfg.widths), "loss_weights": list(cfg.loss_weights)},
    )
    path, log_path, _ = train(source, cfg, run_dir, resume_from=args.resume)
    print(f"checkpoint: {path}")
    print(f"log: {log_path}")


def _model_cfg_probe(cfg: TrainConfig):
    from .netcore import ModelConfig

    return ModelConfig(
        mode=cfg.mode,
        widths=tuple(cfg.widths),
        width_scale=cfg.width_scale,
        emb_dim=cfg.emb_dim,
    )


# ---------------------------------------------------------------------------
# eval


def _default_conditions(manifest):
    kinds = sorted(
        {r.kind for r in manifest.noises if r.id in set(manifest.noise_test)}
    )
    conds = [metrics_mod.Condition()]
    conds += [
        metrics_mod.Condition(kind, snr) for kind in kinds for snr in DEFAULT_SNR_GRID
    ]
    return conds


def cmd_eval(args):
    run_dir = args.run_dir
    os.makedirs(run_dir, exist_ok=True)
    report_path = os.path.join(run_dir, "report.json")
    _ensure_writable(report_path, args.force)

    manifest_path = args.manifest or os.path.join(args.corpus, "manifest_eval.json")
    if not os.path.exists(manifest_path):
        manifest_path = os.path.join(args.corpus, "manifest.json")
    manifest = corpus_mod.load_manifest(manifest_path)
    source = corpus_mod.CorpusAudioSource(manifest, root=args.corpus)

    trials_path = args.trials or os.path.join(args.corpus, "trials.txt")
    trials = metrics_mod.parse_trials(trials_path)

    model, ck_manifest = ckpt.restore_model(args.checkpoint, eval_only=True)
    system = args.tag or model.cfg.mode

    if args.conditions:
        conditions = [
            metrics_mod.Condition.parse(c) for c in args.conditions.split(",")
        ]
    else:
        conditions = _default_conditions(manifest)

    entries = []
    for cond in conditions:
        scores = metrics_mod.run_trials(
            model,
            trials,
            source,
            cond,
            seed=args.seed,
            corrupt_enroll=args.corrupt_enroll,
        )
        eer, thr = metrics_mod.compute_eer(scores)
        min_dcf = metrics_mod.compute_min_dcf(scores)
        tag = str(cond).replace(":", "_")
        score_file = f"scores_{tag}.txt"
        det_file = f"det_{tag}.csv"
        metrics_mod.save_scores(os.path.join(run_dir, score_file), trials, scores)
        metrics_mod.save_det_curve(os.path.join(run_dir, det_file), scores)
        entries.append(
            {
                "condition": str(cond),
                "eer": eer,
                "threshold": thr,
                "min_dcf": min_dcf,
                "n_target": scores.metadata["n_target"],
                "n_nontarget": scores.metadata["n_nontarget"],
                "scores": score_file,
                "det": det_file,
            }
        )
        print(f"{system} {cond}: EER {100*eer:.2f}% minDCF {min_dcf:.3f}")

    noisy = [e for e in entries if e["condition"] != "original"]
    report = {
        "system": system,
        "checkpoint": os.path.abspath(args.checkpoint),
        "trials": os.path.abspath(trials_path),
        "seed": args.seed,
        "corrupt_enroll": bool(args.corrupt_enroll),
        "conditions": entries,
        "average": {
            "eer": float(np.mean([e["eer"] for e in entries])),
            "min_dcf": float(np.mean([e["min_dcf"] for e in entries])),
        },
        "noisy_average": {
            "eer": float(np.mean([e["eer"] for e in noisy])) if noisy else None,
            "min_dcf": float(np.mean([e["min_dcf"] for e in noisy])) if noisy else None,
        },
    }
    _write_json(report_path, report)
    print(f"report: {report_path}")


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args):
    modes = ("baseline", "unet", "exunet") if args.mode == "all" else (args.mode,)
    all_ok = True
    results = []
    for mode in modes:
        rep = grad_check(
            mode, n_params_sampled=args.params, h=args.h, tol=args.tol, seed=args.seed
        )
        results.append(rep)
        for term in loss_terms_for(mode):
            t = rep["terms"][term]
            status = "PASS" if t["pass"] else "FAIL"
            print(
                f"{mode:8s} {term:4s} max_rel_err={t['max_rel_err']:.3e} "
                f"n={t['n_checked']} {status}"
            )
        all_ok = all_ok and rep["pass"]
    if args.run_dir:
        os.makedirs(args.run_dir, exist_ok=True)
        _write_json(os.path.join(args.run_dir, "gradcheck.json"), results)
    if not all_ok:
        raise CliError("gradient check failed")


# ---------------------------------------------------------------------------
# report


def cmd_report(args):
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    table_path = os.path.join(out_dir, "table.txt")
    _ensure_writable(table_path, args.force)
    reports = [report_mod.load_report(p) for p in args.inputs]
    grid = report_mod.build_grid(reports)
    table = report_mod.render_table(grid)
    with open(table_path, "w", encoding="utf-8") as f:
        f.write(table)
    report_mod.write_grid_csv(os.path.join(out_dir, "grid.csv"), grid)
    fig_dir = os.path.join(out_dir, "figures")
    written = report_mod.render_det_figures(reports, fig_dir)
    written += report_mod.render_eer_vs_snr(reports, fig_dir)
    if args.train_logs:
        written += report_mod.render_loss_curves(args.train_logs, fig_dir)
    print(table, end="")
    print(f"grid: {os.path.join(out_dir, 'grid.csv')}")
    for p in written:
        print(f"figure: {p}")


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(
        prog="exunet",
        description="Joint enhancement + speaker-verification experiments",
    )
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("corpus", help="synthesize a speaker corpus + noise pool")
    c.add_argument("--out", required=True)
    c.add_argument("--n-speakers", type=int, default=20)
    c.add_argument("--utts-per-speaker", type=int, default=8)
    c.add_argument("--eval-utts", type=int, default=3)
    c.add_argument("--duration", type=float, default=1.6)
    c.add_argument("--noise-clips", type=int, default=12)
    c.add_argument("--noise-duration", type=float, default=2.0)
    c.add_argument(
        "--noise-kinds", default="stationary,babble_like,impulsive"
    )
    c.add_argument("--noise-test-fraction", type=float, default=0.5)
    c.add_argument("--seed", type=int, default=7)
    c.add_argument("--max-nontargets", type=int, default=None)
    c.add_argument("--no-audio", action="store_true",
                   help="skip writing wav files (regenerate from the manifest)")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_corpus)

    t = sub.add_parser("train", help="train one system on a corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--run-dir", default=_default_run_dir())
    t.add_argument("--mode", choices=["baseline", "unet", "exunet", "exunet-l"])
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-speakers", type=int)
    t.add_argument("--crop-frames", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--threads", type=int)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a trial list over noise conditions")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--manifest", help="override the eval manifest path")
    e.add_argument("--trials", help="trial file (default: corpus/trials.txt)")
    e.add_argument("--conditions",
                   help="comma list like original,stationary:0 (default: full grid)")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--corrupt-enroll", action="store_true")
    e.add_argument("--tag", help="system label for reports (default: mode)")
    e.add_argument("--run-dir", default=_default_run_dir())
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--mode", default="all",
                   choices=["all", "baseline", "unet", "exunet"])
    g.add_argument("--params", type=int, default=20)
    g.add_argument("--h", type=float, default=1e-3)
    g.add_argument("--tol", type=float, default=1e-3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--run-dir")
    g.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="aggregate eval reports into a grid")
    r.add_argument("--inputs", nargs="+", required=True)
    r.add_argument("--train-logs", nargs="*", help="train_log.jsonl files to plot")
    r.add_argument("--out-dir", default=_default_run_dir())
    r.add_argument("--force", action="store_true")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
