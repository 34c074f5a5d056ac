"""Command-line entry point: gen-data, train, eval, predict, gradcheck, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checks import gradient_suite
from .data import SyntheticSpec, gen_data, load_dataset, load_mask
from .errors import ConfigurationError, DataError, NumericalAbort, XVMUError
from .io import format_config, load_checkpoint, read_config, read_pnm, save_checkpoint, to_unit, write_pnm
from .network import ModelConfig, ablation_configs, check_weights
from .tensor import Tensor
from .training import TrainConfig, dsc_iou, jsonl_writer, predict_proba, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_KEYS = {"count": 250, "blur": 1.0, "noise": 0.05}


def defaults() -> dict[str, Any]:
    """Every recognized config key with its default (desk-scale model)."""
    model = ModelConfig.desk().to_dict()
    model["widths"], model["depths"] = tuple(model["widths"]), tuple(model["depths"])
    out = {**model, **dataclasses.asdict(TrainConfig(seed=7))}
    out.update(DATA_KEYS)
    return out


def resolve(args) -> dict[str, Any]:
    cfg = defaults()
    if args.config:
        cfg.update(read_config(args.config, cfg))
    for key in ("seed", "epochs", "folds"):
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def split(cfg: dict[str, Any]) -> tuple[ModelConfig, TrainConfig]:
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    return (ModelConfig(**{k: v for k, v in cfg.items() if k in model_keys}),
            TrainConfig(**{k: v for k, v in cfg.items() if k in train_keys}))


def show_config(command: str, cfg: dict[str, Any]) -> None:
    print(f"# {command}: resolved config")
    print(format_config(cfg), end="", flush=True)


def checkpoint_config(model: ModelConfig, tc: TrainConfig, **extra) -> dict:
    return {"model": model.to_dict(), "train": dataclasses.asdict(tc), **extra}


def load_model(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    ckpt = load_checkpoint(path)
    try:
        model = ModelConfig(**ckpt.config["model"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: checkpoint config block lacks a usable model section ({exc})") from None
    weights = {k: Tensor(v) for k, v in ckpt.tensors.items()}
    check_weights(model, weights)
    return model, weights


# --- subcommands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve(args)
    show_config("gen-data", cfg)
    if cfg["height"] != cfg["width"]:
        raise ConfigurationError(f"synthetic images are square; got {cfg['height']}×{cfg['width']}")
    spec = SyntheticSpec(count=cfg["count"], size=cfg["height"], channels=cfg["in_channels"],
                         blur=cfg["blur"], noise=cfg["noise"], seed=cfg["seed"])
    ids = gen_data(spec, args.out)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def _run_training(model: ModelConfig, tc: TrainConfig, data, out: Path, tag: str = ""):
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / f"metrics{tag}.jsonl"
    started = time.perf_counter()
    result = train(model, tc, data.images, data.masks, log=jsonl_writer(log_path))
    best = result.best
    save_checkpoint(out / f"model{tag}.xvmu",
                    checkpoint_config(model, tc, best_fold=best.fold, best_epoch=best.best_epoch,
                                      val_dsc=best.best_dsc, val_iou=best.best_iou),
                    best.weights)
    return result, time.perf_counter() - started


def cmd_train(args) -> int:
    cfg = resolve(args)
    show_config("train", cfg)
    model, tc = split(cfg)
    data = load_dataset(args.data)
    result, seconds = _run_training(model, tc, data, Path(args.out))
    for r in result.history:
        print(f"fold {r['fold']} epoch {r['epoch']:3d}  loss {r['train_loss']:.4f}  "
              f"val DSC {r['val_dsc']:.4f}  IoU {r['val_iou']:.4f}  lr {r['lr']:.2e}")
    print(f"mean over {len(result.folds)} fold(s): DSC {result.mean_dsc:.4f}  IoU {result.mean_iou:.4f}  "
          f"({seconds:.0f} s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, weights = load_model(args.checkpoint)
    show_config("eval", model.to_dict())
    data = load_dataset(args.data)
    dsc, iou = dsc_iou(predict_proba(data.images, model, weights), data.masks)
    print(f"DSC {dsc:.4f}  IoU {iou:.4f}  over {len(data)} samples")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, weights = load_model(args.checkpoint)
    show_config("predict", model.to_dict())
    image = to_unit(read_pnm(args.image))
    if image.shape != (model.in_channels, model.height, model.width):
        raise ConfigurationError(
            f"image is {image.shape[0]}×{image.shape[1]}×{image.shape[2]}, checkpoint expects "
            f"{model.in_channels}×{model.height}×{model.width}")
    prob = predict_proba(image[None], model, weights)[0]
    mask = (prob >= 0.5).astype(np.uint8)
    write_pnm(args.out, mask * np.uint8(255))
    print(f"wrote {args.out}")
    if args.mask:
        dsc, iou = dsc_iou(prob, load_mask(args.mask))
        print(f"DSC {dsc:.4f}  IoU {iou:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = {"seed": 0 if args.seed is None else args.seed, "tolerance": args.tol, "model_samples": args.samples}
    show_config("gradcheck", cfg)
    started = time.perf_counter()
    worst = 0.0
    total = 0
    for name, rep in gradient_suite(cfg["seed"], args.samples):
        status = "ok" if rep.passed(args.tol) else "FAIL"
        print(f"{status:4s}  {name:32s} max rel err {rep.max_rel_error:.2e}  ({rep.checked} entries)")
        worst = max(worst, rep.max_rel_error)
        total += rep.checked
    print(f"{total} entries checked in {time.perf_counter() - started:.1f} s, worst {worst:.2e}")
    if worst > args.tol:
        raise NumericalAbort(f"gradient check failed: {worst:.2e} > {args.tol:g}")
    return EXIT_OK


def ablation_table(rows: Sequence[dict]) -> str:
    head = f"{'variant':8s} {'sLSTM':>5s} {'mLSTM':>5s} {'config':>12s} {'DSC':>7s} {'IoU':>7s}"
    lines = [head, "-" * len(head)]
    for r in rows:
        mark = lambda flag: "yes" if flag else "no"
        lines.append(f"{'Ver ' + str(r['variant']):8s} {mark(r['use_slstm']):>5s} {mark(r['use_mlstm']):>5s} "
                     f"{r['digest']:>12s} {r['dsc']:7.4f} {r['iou']:7.4f}")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    cfg = resolve(args)
    show_config("ablate", cfg)
    base, tc = split(cfg)
    data = load_dataset(args.data)
    out = Path(args.out)
    rows = []
    for variant, model in ablation_configs(base).items():
        dscs, ious = [], []
        for k in range(args.seeds):
            run_tc = dataclasses.replace(tc, seed=tc.seed + k)
            tag = f"_ver{variant}" + (f"_seed{run_tc.seed}" if args.seeds > 1 else "")
            result, _ = _run_training(model, run_tc, data, out, tag)
            dscs.append(result.mean_dsc)
            ious.append(result.mean_iou)
        rows.append({"variant": variant, "use_slstm": model.use_slstm, "use_mlstm": model.use_mlstm,
                     "digest": model.digest(), "dsc": float(np.mean(dscs)), "iou": float(np.mean(ious))})
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xlstm-vmunet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help: str, out_required: bool = True):
        p.add_argument("--config", help="flat 'key = value' config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--folds", type=int)
        p.add_argument("--out", required=out_required, help=out_help)

    p = sub.add_parser("gen-data", help="write a synthetic lesion dataset")
    common(p, "output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and save the best checkpoint plus metrics log")
    p.add_argument("data", help="dataset directory")
    common(p, "run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="DSC/IoU of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("data")
    common(p, "unused", out_required=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one PGM/PPM image")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--mask", help="ground-truth mask; prints DSC/IoU when given")
    common(p, "output mask path (P5)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the toy model")
    common(p, "unused", out_required=False)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=120, help="sampled entries for the full model")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the four sLSTM/mLSTM variants and tabulate")
    p.add_argument("data", help="dataset directory")
    common(p, "output directory")
    p.add_argument("--seeds", type=int, default=1, help="seeds per variant, results averaged")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except XVMUError as exc:
        label = {EXIT_CONFIG: "configuration error", EXIT_DATA: "data error",
                 EXIT_NUMERIC: "numerical abort"}.get(exc.exit_code, "error")
        print(f"{label}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA

if __name__ == "__main__":
    sys.exit(main())
