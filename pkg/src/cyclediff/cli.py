"""``cdm`` command-line interface.

Exit codes: 0 success, 2 configuration error, 3 precondition failure,
4 numerical abort.  Every output path is
``<out_dir>/<command>-<fingerprint[:12]>-s<seed>...``.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys

import numpy as np

from . import __version__
from .cdm import NumericalAbort, PreconditionError
from .checkpoint import Checkpoint, CheckpointError
from .conditions import Condition, ConditionBatch, Sex
from .config import ConfigError, RunConfig, load_config
from .diffusion import NumericalError, counterfactual, ddim_sample
from .io import atomic_write_text, manifest_csv, read_pgm, write_pgm
from .metrics import (PredictorGateError, check_gate, comparison_summary, counterfactual_table,
                      direct_generation_eval, sweep_specs, table3_csv, write_report)
from .ndtensor import Rng, Tensor, no_grad
from .phantom import PhantomSpec, oracle_age, render, render_batch, sample_dataset, ventricle_region
from . import pipeline as P

logger = logging.getLogger("cyclediff")

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERICAL = 0, 2, 3, 4

_DATA_KEYS = ["image_size", "n_train", "age_distribution"]
_AE_KEYS = ["ae_mode", "ae_channels", "ae_latent_channels", "ae_kl_weight", "ae_steps", "ae_batch_size", "ae_lr"]
_MODEL_KEYS = ["unet_channels", "time_basis", "embed_dim", "groups", "schedule", "timesteps"]
_TRAIN_KEYS = ["cycle_lambda", "cycle_norm", "counterfactual_sampler", "pretrain_steps", "finetune_steps",
               "t_sampling", "renoise_for_cycle", "batch_size", "lr_pretrain", "lr_finetune", "log_every",
               "checkpoint_every"]
_PRED_KEYS = ["predictor_steps", "predictor_rounds", "predictor_n_train", "predictor_n_val", "image_size"]
_EVAL_KEYS = ["inversion_mode", "inversion_k", "eval_counterfactual_n", "eval_direct_n"] + _PRED_KEYS
_RUN_KEYS = ["seed", "out_dir"]

KEYS_READ = {
    "phantom export": ["image_size", "age_distribution"] + _RUN_KEYS,
    "train": _DATA_KEYS + _AE_KEYS + _MODEL_KEYS + _TRAIN_KEYS + _RUN_KEYS,
    "generate": _RUN_KEYS,
    "counterfactual": ["inversion_mode", "inversion_k"] + _RUN_KEYS,
    "evaluate": _EVAL_KEYS + _RUN_KEYS,
    "train-predictors": _PRED_KEYS + _RUN_KEYS,
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _epilog(command: str) -> str:
    keys = ", ".join(KEYS_READ[command])
    return (f"config keys read: {keys}.  Set them in --config FILE or with --set key=value; "
            "seed defaults to $CDM_SEED. Exit codes: 0 ok, 2 config error, 3 precondition failure, "
            "4 numerical abort.")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="global seed (overrides config and $CDM_SEED)")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="cdm", description="Cycle-consistent conditional diffusion on phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="phantom dataset utilities")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    ex = phs.add_parser("export", help="write phantoms as PGM plus a CSV manifest",
                        epilog=_epilog("phantom export"), formatter_class=fmt)
    _common(ex)
    ex.add_argument("--n", type=int, required=True, help="number of phantoms")

    tr = sub.add_parser("train", help="pretrain or fine-tune the denoiser",
                        epilog=_epilog("train"), formatter_class=fmt)
    tr.add_argument("phase", choices=["pretrain", "finetune"])
    _common(tr)
    tr.add_argument("--init", help="checkpoint to start from (finetune: the pretrain checkpoint)")
    tr.add_argument("--resume", help="checkpoint of this phase to continue")
    tr.add_argument("--steps", type=int, help="run this many steps instead of the configured count")
    tr.add_argument("--force", action="store_true", help="allow finetune from random init")
    tr.add_argument("--allow-config-drift", action="store_true",
                    help="accept a checkpoint whose config fingerprint differs")

    ge = sub.add_parser("generate", help="sample one image for a condition",
                        epilog=_epilog("generate"), formatter_class=fmt)
    _common(ge)
    ge.add_argument("--checkpoint", required=True)
    ge.add_argument("--age", type=float, required=True)
    ge.add_argument("--sex", required=True, help="female|male")
    ge.add_argument("--trace", action="store_true", help="also write every step's clean estimate as PGM")

    cf = sub.add_parser("counterfactual", help="invert an image and resample it under a new condition",
                        epilog=_epilog("counterfactual"), formatter_class=fmt)
    _common(cf)
    cf.add_argument("--checkpoint", required=True)
    src = cf.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="source PGM (needs --source-age and --source-sex)")
    src.add_argument("--identity-seed", type=int, help="render the source phantom from this identity")
    cf.add_argument("--source-age", type=float, required=True)
    cf.add_argument("--source-sex", required=True)
    cf.add_argument("--target-age", type=float, required=True)
    cf.add_argument("--target-sex", help="defaults to the source sex")

    ev = sub.add_parser("evaluate", help="direct-generation and counterfactual metrics",
                        epilog=_epilog("evaluate"), formatter_class=fmt)
    _common(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--baseline", help="second checkpoint (e.g. pretrain-only) for a side-by-side comparison")
    ev.add_argument("--mode", choices=["direct", "counterfactual", "both"], default="both")
    ev.add_argument("--predictors", help="checkpoint from train-predictors (trained on the fly if absent)")

    tp = sub.add_parser("train-predictors", help="train the age regressor and sex classifier",
                        epilog=_epilog("train-predictors"), formatter_class=fmt)
    _common(tp)
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    if args.seed is not None:
        out["seed"] = str(args.seed)
    if args.out_dir is not None:
        out["out_dir"] = args.out_dir
    return out


def _config(args) -> RunConfig:
    return load_config(args.config, _overrides(args))


def _condition(age: float, sex: str) -> Condition:
    try:
        return Condition(age, Sex.parse(sex))
    except ValueError as e:
        raise CliError(f"invalid condition: {e}", EXIT_CONFIG) from None


def _load_checkpoint(path: str) -> Checkpoint:
    try:
        return Checkpoint.load(path)
    except CheckpointError as e:
        raise CliError(str(e), EXIT_PRECONDITION) from None


def _model_config(ck: Checkpoint, cli_cfg: RunConfig) -> RunConfig:
    """Model settings from the checkpoint; run settings (seed, out_dir) from the command line."""
    base = P.checkpoint_config(ck)
    return base.with_overrides({"seed": str(cli_cfg.seed), "out_dir": cli_cfg.out_dir,
                                "inversion_mode": cli_cfg.inversion_mode,
                                "inversion_k": str(cli_cfg.inversion_k)})


# -- commands -----------------------------------------------------------------

def cmd_phantom_export(cfg: RunConfig, n: int) -> str:
    if n < 1:
        raise CliError("--n must be positive", EXIT_CONFIG)
    out = P.output_path(cfg, "phantom-export", "")
    try:
        os.makedirs(out, exist_ok=True)
        specs = sample_dataset(n, cfg.seed, cfg.age_distribution, cfg.image_size)
        for i, s in enumerate(specs):
            write_pgm(os.path.join(out, f"{i:05d}.pgm"), render(s).array)
        atomic_write_text(os.path.join(out, "manifest.csv"), manifest_csv(specs))
    except OSError as e:
        raise CliError(f"cannot write to {out}: {e}", EXIT_PRECONDITION) from None
    return out


def cmd_train(cfg: RunConfig, phase: str, init: str | None = None, resume: str | None = None,
              steps: int | None = None, force: bool = False, allow_drift: bool = False) -> P.TrainResult:
    ae = None
    if resume or init:
        ck = _load_checkpoint(resume or init)
        if ck.fingerprint != cfg.fingerprint() and not allow_drift:
            raise CliError(f"checkpoint {resume or init} was written with config fingerprint {ck.fingerprint[:12]}, "
                           f"current config is {cfg.fingerprint()[:12]}; pass --allow-config-drift to continue "
                           "anyway", EXIT_PRECONDITION)
        state, ae, _ = P.state_from_checkpoint(ck)
        if resume and ck.phase not in (phase, "init"):
            raise CliError(f"--resume expects a {phase} checkpoint, got phase {ck.phase!r}", EXIT_PRECONDITION)
        if phase == "finetune" and init and state.phase_steps.get("pretrain", 0) == 0 and not force:
            raise CliError("the --init checkpoint has no pretraining steps; pass --force to fine-tune anyway",
                           EXIT_PRECONDITION)
        if init and phase == "finetune" and ck.phase == "pretrain":
            state = P.start_finetune(state, cfg)
        if ae is not None and cfg.ae_mode == "identity":
            ae = None
    else:
        if phase == "finetune" and not force:
            raise CliError("finetune needs a pretrain checkpoint: pass --init <pretrain.ckpt> "
                           "(or --force to fine-tune from random initialisation)", EXIT_PRECONDITION)
        state = P.new_state(cfg)
    if ae is None:
        ae = P.make_autoencoder(cfg)
    data = P.training_data(cfg, ae)
    if resume is None:
        # fresh output files for a new run
        for suffix in (".csv",):
            path = P.output_path(cfg, f"train-{phase}", suffix)
            if os.path.exists(path):
                os.unlink(path)
    return P.run_phase(cfg, phase, state, data, ae, steps=steps, force=force)


def cmd_generate(cfg: RunConfig, ck: Checkpoint, cond: Condition, trace: bool = False) -> str:
    mcfg = _model_config(ck, cfg)
    gm = P.generative_model(ck)
    z_T = Rng(mcfg.seed).normal_tensor((1,) + tuple(gm.autoencoder.latent_shape))
    z, rec = ddim_sample(gm.eps_model, z_T, ConditionBatch.of([cond]), gm.schedule, trace=trace)
    img = gm.decode(z)[0]
    stem = P.output_path(mcfg, "generate", f"-age{cond.age:g}-{cond.sex.name.lower()}")
    os.makedirs(mcfg.out_dir, exist_ok=True)
    write_pgm(stem + ".pgm", img)
    if rec is not None:
        tdir = stem + "-trace"
        os.makedirs(tdir, exist_ok=True)
        for t, _, z0 in rec.steps:
            write_pgm(os.path.join(tdir, f"t{t:04d}.pgm"), gm.decode(Tensor(z0))[0])
    return stem + ".pgm"


def difference_stats(source: np.ndarray, cf: np.ndarray) -> dict:
    """Summary of a counterfactual edit; the ventricle region is the union of
    the segmented source and counterfactual ventricles."""
    d = cf.astype(np.float64) - source.astype(np.float64)
    vs, vc = ventricle_region(source), ventricle_region(cf)
    head = float((source > 0.05).sum())
    region = (vs if vs is not None else np.zeros_like(d, bool)) | (vc if vc is not None else np.zeros_like(d, bool))
    area_s = 0.0 if vs is None else float(vs.sum())
    area_c = 0.0 if vc is None else float(vc.sum())
    return {"mean_abs_delta": float(np.abs(d).mean()),
            "ventricle_area_delta": (area_c - area_s) / max(head, 1.0),
            "ventricle_region_mean_delta": float(d[region].mean()) if region.any() else 0.0,
            "oracle_age_source": oracle_age(source), "oracle_age_counterfactual": oracle_age(cf)}


def cmd_counterfactual(cfg: RunConfig, ck: Checkpoint, source: np.ndarray, src: Condition,
                       tgt: Condition) -> dict[str, str]:
    mcfg = _model_config(ck, cfg)
    gm = P.generative_model(ck)
    x = source.reshape(1, 1, *source.shape[-2:]).astype(np.float32)
    z0 = gm.encode(x)
    out = counterfactual(gm.eps_model, z0, ConditionBatch.of([src]), ConditionBatch.of([tgt]), gm.schedule,
                         mcfg.inversion_mode, mcfg.inversion_k)
    img = gm.decode(out)[0, 0]
    src_img = x[0, 0]
    stem = P.output_path(mcfg, "counterfactual",
                         f"-{src.age:g}{src.sex.name[0].lower()}-to-{tgt.age:g}{tgt.sex.name[0].lower()}")
    os.makedirs(mcfg.out_dir, exist_ok=True)
    d = img.astype(np.float64) - src_img
    paths = {"counterfactual": stem + ".pgm", "diff_pos": stem + "-diff-pos.pgm",
             "diff_neg": stem + "-diff-neg.pgm", "stats": stem + "-stats.csv"}
    write_pgm(paths["counterfactual"], img)
    write_pgm(paths["diff_pos"], np.clip(d, 0.0, 1.0))
    write_pgm(paths["diff_neg"], np.clip(-d, 0.0, 1.0))
    stats = difference_stats(src_img, img)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["source_age", "source_sex", "target_age", "target_sex"] + list(stats))
    w.writerow([src.age, src.sex.name.lower(), tgt.age, tgt.sex.name.lower()]
               + ["" if v is None else v for v in stats.values()])
    atomic_write_text(paths["stats"], buf.getvalue())
    return paths


def cmd_train_predictors(cfg: RunConfig) -> str:
    try:
        pair = P.fit_predictors(cfg)
    except PredictorGateError as e:
        raise CliError(str(e), EXIT_PRECONDITION) from None
    path = P.output_path(cfg, "train-predictors", ".ckpt")
    os.makedirs(cfg.out_dir, exist_ok=True)
    P.predictors_to_checkpoint(pair, cfg).save(path)
    return path


def cmd_evaluate(cfg: RunConfig, checkpoint: str, mode: str = "both", predictors: str | None = None,
                 baseline: str | None = None) -> dict[str, str]:
    try:
        if predictors:
            pair = P.predictors_from_checkpoint(_load_checkpoint(predictors))
            check_gate(pair)
        else:
            pair = P.fit_predictors(cfg)
    except (PredictorGateError, CheckpointError) as e:
        raise CliError(str(e), EXIT_PRECONDITION) from None
    runs = [("model", checkpoint)] + ([("baseline", baseline)] if baseline else [])
    reports = {}
    paths: dict[str, str] = {}
    out_root = P.output_path(cfg, "evaluate", "")
    for name, path in runs:
        ck = _load_checkpoint(path)
        mcfg = _model_config(ck, cfg)
        gm = P.generative_model(ck)
        label = f"{name}-{ck.phase}"
        rep = None
        if mode in ("direct", "both"):
            rep = direct_generation_eval(gm, pair, n=cfg.eval_direct_n, seed=cfg.seed, name=label,
                                         fingerprint=ck.fingerprint)
        if mode in ("counterfactual", "both"):
            specs = sweep_specs(cfg.eval_counterfactual_n, cfg.seed + 100, mcfg.image_size)
            cf = counterfactual_table(gm, specs, pair, mode=cfg.inversion_mode, k=cfg.inversion_k, name=label,
                                      fingerprint=ck.fingerprint, seed=cfg.seed + 100)
            rep = cf if rep is None else rep.merge(cf)
        rep.cycle_lambda = mcfg.cycle_lambda
        rep.seeds.update({"run": cfg.seed, "train": mcfg.seed})
        reports[name] = rep
        paths.update({f"{name}_{k}": v for k, v in write_report(rep, out_root, label).items()})
    if mode in ("counterfactual", "both"):
        paths["table3"] = os.path.join(out_root, "table3.csv")
        atomic_write_text(paths["table3"], table3_csv(list(reports.values())))
    if baseline and mode in ("counterfactual", "both"):
        paths["comparison"] = os.path.join(out_root, "comparison.csv")
        atomic_write_text(paths["comparison"], comparison_summary(reports["baseline"], reports["model"]))
    return paths


# -- entry point --------------------------------------------------------------

def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "phantom":
            print(cmd_phantom_export(cfg, args.n))
        elif args.command == "train":
            res = cmd_train(cfg, args.phase, init=args.init, resume=args.resume, steps=args.steps,
                            force=args.force, allow_drift=args.allow_config_drift)
            print(res.checkpoint_path)
            print(res.log_path)
        elif args.command == "generate":
            cond = _condition(args.age, args.sex)
            print(cmd_generate(cfg, _load_checkpoint(args.checkpoint), cond, args.trace))
        elif args.command == "counterfactual":
            src = _condition(args.source_age, args.source_sex)
            tgt = _condition(args.target_age, args.target_sex or args.source_sex)
            ck = _load_checkpoint(args.checkpoint)
            if args.input:
                try:
                    source = read_pgm(args.input)
                except (OSError, ValueError) as e:
                    raise CliError(f"cannot read {args.input}: {e}", EXIT_PRECONDITION) from None
            else:
                size = P.checkpoint_config(ck).image_size
                source = render(PhantomSpec(src, args.identity_seed, size)).array
            for v in cmd_counterfactual(cfg, ck, source, src, tgt).values():
                print(v)
        elif args.command == "evaluate":
            for v in cmd_evaluate(cfg, args.checkpoint, args.mode, args.predictors, args.baseline).values():
                print(v)
        elif args.command == "train-predictors":
            print(cmd_train_predictors(cfg))
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (PreconditionError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (NumericalAbort, NumericalError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
