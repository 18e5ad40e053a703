"""Command-line entry point.

Every command reads one JSON run config (``--config``), applies
``--set key=value`` overrides (dotted keys reach into the ``model``,
``train`` and ``data`` sections) and writes its outputs under ``--out``.

Example::

    egopose generate --out runs/a --set data.num_samples=200
    egopose train --out runs/a --set train.epochs=2
    egopose eval --out runs/a
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

from .camera import default_rig, load_rig, save_rig
from .config import ModelConfig, TrainConfig
from .errors import DatasetError, EgoPoseError, InvalidInputError
from .model import build_model, export_self_attention
from .skeleton import KinematicTree, default_tree
from .synthdata import RenderConfig, generate_dataset, read_dataset, write_dataset
from .trainer import (
    Checkpoint,
    EncoderCheckpoint,
    ablate_proposal_noise,
    configure_threads,
    evaluate,
    grad_check,
    jitter_parameters,
    model_config_for,
    pretrain_heatmaps,
    train,
)

log = logging.getLogger("egopose")

COMMANDS = ("generate", "pretrain", "train", "eval", "gradcheck", "ablate-noise", "export-attn")

DEFAULTS: dict = {
    "seed": 0,
    "dataset": None,          # defaults to <out>/dataset
    "val_dataset": None,
    "rig": None,              # camera rig JSON; default rig when absent
    "skeleton": None,         # skeleton JSON; default 16-joint tree when absent
    "checkpoint": None,       # defaults to <out>/model.ckpt
    "init_encoder": None,     # stripped pre-trained encoder for `train`
    "sigmas": [0.0, 10.0, 30.0, 50.0],
    "gradcheck": {"eps": 1e-4, "max_coords": 200, "tolerance": None},
    "data": {"num_samples": 200, "image_size": [64, 64], "views": 2, "num_joints": 16,
             "sigma_px": 1.5, "noise": 0.05, "image_mode": "raw", "prefix": ""},
    "model": {},
    "train": {},
}

# the reference gradient-check model: 4 joints, 8 feature channels, 16-wide
# tokens, one refinement layer, 2 heads x 2 points, 16x16 feature maps
GRADCHECK_MODEL = dict(num_joints=4, views=2, image_size=(64, 64), feature_channels=8,
                       token_dim=16, num_layers=1, num_heads=2, num_points=2, ppn_hidden=16,
                       encoder_channels=(8, 8, 8), heatmap_head=False)


class UsageError(Exception):
    """Invalid run configuration; reported with the usage message."""


# ------------------------------------------------------------ config handling


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(value)


def load_run_config(path, overrides=(), seed=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    fields = {"seed": cfg["seed"], **cfg["train"]}
    try:
        return TrainConfig.from_dict(_checked(fields, TrainConfig, "train"))
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid train config: {exc}") from None


def _model_overrides(cfg: dict) -> dict:
    known = set(ModelConfig.__dataclass_fields__)
    _checked(cfg["model"], ModelConfig, "model")
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg["model"].items()
            if k in known}


def _checked(section: dict, cls, name: str) -> dict:
    unknown = set(section) - set(cls.__dataclass_fields__)
    if unknown:
        raise UsageError(f"unknown {name} setting(s): {', '.join(sorted(unknown))}")
    return section


def _model_config(cfg: dict, dataset) -> ModelConfig:
    try:
        return model_config_for(dataset, **_model_overrides(cfg))
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None


def _path(cfg: dict, key: str, out: Path, default: str) -> Path:
    return Path(cfg[key]) if cfg.get(key) else out / default


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_dataset(cfg: dict, out: Path, key: str = "dataset"):
    return read_dataset(_path(cfg, key, out, "dataset"))


# ------------------------------------------------------------ commands


def cmd_generate(cfg: dict, out: Path) -> int:
    d = cfg["data"]
    tree = KinematicTree.load(_existing(Path(cfg["skeleton"]), "skeleton")) \
        if cfg.get("skeleton") else default_tree()
    if int(d["num_joints"]) != tree.num_joints:
        tree = tree.truncate(int(d["num_joints"]))
    if cfg.get("rig"):
        cams = load_rig(_existing(Path(cfg["rig"]), "camera rig"))
    else:
        cams = default_rig(image_size=tuple(d["image_size"]), views=int(d["views"]))
    if int(d["num_samples"]) < 1:
        raise UsageError("data.num_samples must be >= 1")
    render = RenderConfig(sigma_px=float(d["sigma_px"]), noise=float(d["noise"]))
    ds = generate_dataset(int(d["num_samples"]), tree, cams, seed=int(cfg["seed"]),
                          render_cfg=render, actions=d.get("actions"), prefix=d["prefix"])
    root = write_dataset(ds, _path(cfg, "dataset", out, "dataset"), image_mode=d["image_mode"])
    save_rig(cams, out / "rig.json")
    print(f"wrote {len(ds)} samples to {root}")
    return 0


def _log_writer(path: Path):
    fh = open(path, "w")

    def write(entry: dict) -> None:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")
        fh.flush()
    return fh, write


def cmd_pretrain(cfg: dict, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    tcfg = _train_config(cfg)
    mcfg = _model_config(cfg, ds)
    fh, write = _log_writer(out / "pretrain_log.jsonl")
    try:
        ck = pretrain_heatmaps(ds, tcfg, mcfg, progress=write)
    finally:
        fh.close()
    ck.save(out / "encoder.ckpt")
    ck.stripped().save(out / "encoder_stripped.ckpt")
    print(f"pre-training loss {ck.loss_history[0]:.6g} -> {ck.loss_history[-1]:.6g}")
    return 0


def cmd_train(cfg: dict, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    val = read_dataset(Path(cfg["val_dataset"])) if cfg.get("val_dataset") else None
    tcfg = _train_config(cfg)
    mcfg = _model_config(cfg, ds)
    init = None
    if cfg.get("init_encoder"):
        init = EncoderCheckpoint.load(_existing(Path(cfg["init_encoder"]), "encoder checkpoint"))
    ck = train(ds, tcfg, mcfg, init=init, val_dataset=val, log_path=out / "train_log.jsonl")
    path = ck.save(_path(cfg, "checkpoint", out, "model.ckpt"))
    last = ck.log[-1]
    print(f"trained {ck.step} steps; final loss {last['loss']:.6g}, "
          f"val MPJPE {last.get('val_mpjpe', float('nan')):.3f} mm; wrote {path}")
    return 0


def _load_checkpoint(cfg: dict, out: Path) -> Checkpoint:
    return Checkpoint.load(_existing(_path(cfg, "checkpoint", out, "model.ckpt"), "checkpoint"))


def cmd_eval(cfg: dict, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    ck = _load_checkpoint(cfg, out)
    report = evaluate(ck, ds)
    report.to_json(out / "report.json")
    report.cdf_to_csv(out / "cdf.csv")
    print(f"MPJPE {report.mpjpe:.3f} mm, PA-MPJPE {report.pa_mpjpe:.3f} mm "
          f"over {report.num_samples} samples")
    return 0


def cmd_gradcheck(cfg: dict, out: Path) -> int:
    g = cfg["gradcheck"]
    tcfg = _train_config(cfg)
    model_kw = {**GRADCHECK_MODEL, **_model_overrides(cfg)}
    try:
        mcfg = ModelConfig(**model_kw)
    except (InvalidInputError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid model config: {exc}") from None
    tree = default_tree().truncate(mcfg.num_joints)
    cams = default_rig(image_size=mcfg.image_size, views=mcfg.views)
    sample = generate_dataset(1, tree, cams, seed=int(cfg["seed"]))[0]
    model = build_model(mcfg, cams, tree.rest_pose(), int(cfg["seed"]), tcfg.dtype)
    jitter_parameters(model, 0.05, int(cfg["seed"]))
    if tcfg.precision != "64-bit":
        raise UsageError("gradcheck needs train.precision = 64-bit")
    tol = 1e-4 if g.get("tolerance") is None else float(g["tolerance"])
    res = grad_check(model, sample, eps=float(g["eps"]), max_coords=int(g["max_coords"]),
                     seed=int(cfg["seed"]))
    _write_json(out / "gradcheck.json", {
        "max_rel_error": res.max_rel_error, "max_coord_error": res.max_coord_error,
        "coords_checked": res.coords_checked, "eps": float(g["eps"]), "tolerance": tol,
        "per_block": res.per_block,
    })
    worst = max(res.per_block, key=res.per_block.get)
    print(f"max relative error {res.max_rel_error:.3e} (block {worst}, "
          f"{res.coords_checked} coordinates)")
    return 0 if res.max_rel_error < tol else 1


def cmd_ablate_noise(cfg: dict, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    ck = _load_checkpoint(cfg, out)
    sigmas = [float(s) for s in cfg["sigmas"]]
    rows = ablate_proposal_noise(ck.model, ds, sigmas, seed=int(cfg["seed"]))
    _write_csv(out / "ablation_noise.csv", ["sigma_mm", "proposal_mpjpe", "refined_mpjpe"],
               [[r["sigma"], r["proposal_mpjpe"], r["refined_mpjpe"]] for r in rows])
    for r in rows:
        print(f"sigma {r['sigma']:g} mm: proposal {r['proposal_mpjpe']:.3f} "
              f"refined {r['refined_mpjpe']:.3f}")
    return 0


def cmd_export_attn(cfg: dict, out: Path) -> int:
    ds = _load_dataset(cfg, out)
    ck = _load_checkpoint(cfg, out)
    mat = export_self_attention(ck.model, ds.samples)
    names = list(ds.tree.names)
    _write_csv(out / "attention.csv", ["joint"] + names,
               [[n] + [repr(float(x)) for x in row] for n, row in zip(names, mat)])
    print(f"wrote {len(names)}x{len(names)} attention matrix")
    return 0


HANDLERS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate-noise": cmd_ablate_noise,
    "export-attn": cmd_export_attn,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="egopose", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run config")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry (repeatable; dotted keys)")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_threads()
    out = Path(args.out)
    try:
        cfg = load_run_config(args.config, args.set, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](cfg, out)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"egopose: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DatasetError) as exc:
        print(f"egopose: error: {exc}", file=sys.stderr)
        return 1
    except EgoPoseError as exc:
        print(f"egopose: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":      # pragma: no cover
    sys.exit(main())
