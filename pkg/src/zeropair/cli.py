"""zeropair command line: train, translate, evaluate, inspect-params, make-splits, gen-toy.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
Flags given on the command line override the matching config-file values.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .codec import (Colormap, DepthMap, LabelMap, RgbImage, decode_depth, decode_semantic_nn,
                    encode_depth, encode_semantic, write_png)
from .config import load_config, load_samples, resolve_palette, resolve_splits, set_mode
from .data import (SplitSpec, build_tensors, derive_seed, image_tensor, make_zero_pair_splits,
                   read_split_manifest, toy_samples, write_depth_png, write_sample_folder,
                   write_split_manifest)
from .errors import ConfigError, InputError, NumericalError
from .model import (ConditionMode, Domain, NetworkConfig, Networks, cbn_channel_sum,
                    cbn_param_count, count_params)
from .trainer import configure_determinism, networks_from_checkpoint, run_training

log = logging.getLogger("zeropair")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


# -- train --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        cfg = set_mode(cfg, args.mode)
    train = {}
    if args.seed is not None:
        train["seed"] = args.seed
    if args.out_dir:
        train["out_dir"] = args.out_dir
    cfg = cfg.with_overrides(train=train)
    every = max(1, args.log_every)

    def progress(i, rows):
        if (i + 1) % every == 0:
            parts = ", ".join(f"{k}={rep.total:.4f}" for k, rep in rows)
            log.info("iter %d/%d %s", i + 1, cfg.loss.total_iters, parts)

    Path(cfg.train.out_dir).mkdir(parents=True, exist_ok=True)
    (Path(cfg.train.out_dir) / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    ckpt, log_path = run_training(cfg, resume=args.resume, progress=progress)
    print(f"checkpoint: {ckpt}")
    print(f"loss log: {log_path}")
    return EXIT_OK


# -- translate ----------------------------------------------------------------

def _read_input(path: Path, source: Domain, palette, cm: Colormap, size: int):
    """Network-domain tensor for one file in the source domain's representation."""
    if not path.is_file():
        raise ConfigError(f"input {path} not found")
    with Image.open(path) as im:
        if source is Domain.D and im.mode in ("I", "I;16", "I;16B", "L"):
            raw = np.asarray(im).astype(np.float64)
            full = 255.0 if im.mode == "L" else 65535.0
            img = encode_depth(DepthMap(np.clip(raw / full, 0, 1)), cm)
        elif source is Domain.S and im.mode == "P":
            img = encode_semantic(LabelMap(np.asarray(im).astype(np.int64), len(palette)),
                                  palette)
        else:
            img = RgbImage(np.asarray(im.convert("RGB")))
    return image_tensor(img, size)[None]


def _write_output(path: Path, out, target: Domain, palette, cm: Colormap) -> None:
    img = RgbImage(out[0].clamp(-1, 1).permute(1, 2, 0).numpy(), network=True)
    path.parent.mkdir(parents=True, exist_ok=True)
    if target is Domain.S:
        write_png(path, encode_semantic(decode_semantic_nn(img, palette), palette))
    elif target is Domain.D:
        write_depth_png(path, decode_depth(img, cm))
    else:
        write_png(path, img.to_file())


def cmd_translate(args) -> int:
    nets, cfg, _ = networks_from_checkpoint(args.ckpt)
    source, target = Domain.parse(args.source), Domain.parse(args.target)
    palette = resolve_palette(cfg.data.palette, cfg.data.n_classes)
    cm = Colormap.viridis()
    x = _read_input(Path(args.input), source, palette, cm, cfg.model.image_size)
    with torch.no_grad():
        out = nets.translate(x, source, target)
    _write_output(Path(args.out), out, target, palette, cm)
    print(f"wrote {args.out} ({source.name} -> {target.name}, mode {cfg.model.mode.value})")
    return EXIT_OK


# -- evaluate -----------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .metrics import evaluate_d2s

    nets, cfg, _ = networks_from_checkpoint(args.ckpt)
    if args.config:
        cfg = load_config(args.config)
    test_ids = read_split_manifest(args.split)["splits"]["TEST_DS"]
    if not test_ids:
        raise ConfigError(f"{args.split}: TEST_DS split is empty")
    samples, palette = load_samples(cfg.data)
    data = build_tensors(samples, {"RD": [], "RS": [], "TEST_DS": test_ids},
                         cfg.model.image_size, palette)
    report = evaluate_d2s(nets, data.test_depth, data.test_labels, palette,
                          dump_dir=args.dump_images, test_ids=data.test_ids)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    table = report.table()
    out.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


# -- inspect-params -----------------------------------------------------------

def param_summary(model_cfg: NetworkConfig) -> dict:
    """Per-module counts for both conditioning modes plus the closed-form delta check."""
    out = {}
    for mode in ConditionMode:
        cfg = NetworkConfig(**{**model_cfg.to_dict(), "mode": mode})
        nets = Networks(cfg)
        row = {"encoder": count_params(nets.encoder), "decoder": count_params(nets.decoder),
               "discriminators": count_params(nets.discriminators),
               "classifier": count_params(nets.classifier) if nets.classifier else 0}
        row["generator"] = row["encoder"] + row["decoder"]
        row["conditional_tables"] = cbn_param_count(cfg)
        out[mode.value] = row
    n = model_cfg.n_domains
    delta = out["dcn"]["generator"] - out["dcn0"]["generator"]
    closed = (n * n - n) * 2 * cbn_channel_sum(model_cfg)
    out["delta"] = {"measured": delta, "closed_form": closed, "match": delta == closed}
    return out


def cmd_inspect_params(args) -> int:
    cfg = load_config(args.config)
    s = param_summary(cfg.model)
    cols = ["encoder", "decoder", "generator", "conditional_tables", "discriminators",
            "classifier"]
    print(f"{'mode':<6}" + "".join(f"{c:>20}" for c in cols))
    for mode in ("dcn0", "dcn"):
        print(f"{mode:<6}" + "".join(f"{s[mode][c]:>20,}" for c in cols))
    print(f"generator totals: DCN-0 {s['dcn0']['generator'] / 1e6:.2f}M, "
          f"DCN {s['dcn']['generator'] / 1e6:.2f}M")
    d = s["delta"]
    n = cfg.model.n_domains
    print(f"delta DCN - DCN-0: {d['measured']:,}; closed form ({n}^2 - {n}) * 2 * "
          f"{cbn_channel_sum(cfg.model)} = {d['closed_form']:,}; "
          f"{'match' if d['match'] else 'MISMATCH'}")
    if args.json:
        Path(args.json).write_text(json.dumps(s, indent=2))
    return EXIT_OK if d["match"] else 1


# -- make-splits / gen-toy ----------------------------------------------------

def cmd_make_splits(args) -> int:
    cfg = load_config(args.config)
    data = cfg.data
    if args.seed is not None:
        data = replace(data, seed=args.seed, split_manifest=None)
    samples, _ = load_samples(data)
    splits = resolve_splits(data, samples)
    source = {"source": data.source, "root": data.root, "seed": data.seed}
    write_split_manifest(args.out, splits, source)
    print(f"wrote {args.out}: " + ", ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return EXIT_OK


def cmd_gen_toy(args) -> int:
    samples = toy_samples(args.n, args.size, args.classes, args.seed)
    out = Path(args.out)
    write_sample_folder(out, samples, resolve_palette("toy", args.classes))
    if args.splits:
        spec = SplitSpec(*args.splits, seed=derive_seed(args.seed, "splits"))
        rd, rs, test = make_zero_pair_splits([s.id for s in samples], spec)
        write_split_manifest(out / "splits.json", {"RD": rd, "RS": rs, "TEST_DS": test},
                             {"source": "folder", "root": str(out), "seed": args.seed})
    print(f"wrote {len(samples)} toy scenes to {out}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="zeropair", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a DCN-0 or DCN model")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=[m.value for m in ConditionMode])
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out-dir")
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate one image between domains")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--source", required=True, choices=["r", "d", "s"])
    tr.add_argument("--target", required=True, choices=["r", "d", "s"])
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="depth to semantics mIoU and pixel accuracy")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", required=True, help="split manifest JSON with a TEST_DS list")
    e.add_argument("--out", required=True, help="report JSON; the table goes next to it")
    e.add_argument("--config", help="data config (default: the one stored in the checkpoint)")
    e.add_argument("--dump-images", metavar="DIR")
    e.set_defaults(func=cmd_evaluate)

    ip = sub.add_parser("inspect-params", help="parameter counts for both modes")
    ip.add_argument("--config", required=True)
    ip.add_argument("--json")
    ip.set_defaults(func=cmd_inspect_params)

    ms = sub.add_parser("make-splits", help="write a zero-pair split manifest")
    ms.add_argument("--config", required=True)
    ms.add_argument("--out", required=True)
    ms.add_argument("--seed", type=int)
    ms.set_defaults(func=cmd_make_splits)

    g = sub.add_parser("gen-toy", help="render toy scenes into the folder layout")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=450)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--splits", type=int, nargs=3, metavar=("RD", "RS", "TEST"))
    g.set_defaults(func=cmd_gen_toy)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    configure_determinism(1)
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
