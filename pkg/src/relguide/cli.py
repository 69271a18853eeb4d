"""Command-line entry point: ``relguide <subcommand> --config FILE --seed N --out PATH``.

Exit codes: 0 success, 1 self-test failure, 2 usage error, 3 bad configuration,
4 malformed or inconsistent input file, 5 training divergence, 6 I/O failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import evalkit as ek
from . import fileio
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config
from .fusion import build_consensus, fuse_baseline_mean, source_fields
from .numerics import NumericsError, Rng
from .relational import Projection, relational_field
from .synthworld import extract, gen_scene
from .training import DivergenceError, projection_for, train
from .upsampler import UpsamplerParams, upsample

EXIT_OK, EXIT_SELFTEST, EXIT_USAGE, EXIT_CONFIG, EXIT_FORMAT, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4, 5, 6


class UsageError(Exception):
    pass


def _load_cfg(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, []):
            raise UsageError(f"{args.cmd} needs --{n.replace('_', '-')}")


def _vfm(cfg: RunConfig, i):
    if not 0 <= i < len(cfg.vfms):
        raise ConfigError(f"extractor index {i} is not configured")
    return cfg.vfms[i]


def _projection(cfg: RunConfig, F, vfm_index):
    C = F.shape[-1]
    if vfm_index is not None:
        v = _vfm(cfg, vfm_index)
        if v.channels != C:
            raise NumericsError(f"map has {C} channels, extractor {vfm_index} has {v.channels}")
        return projection_for(v, cfg.relational)
    if C == cfg.relational.dim:
        return Projection.identity(C)
    return Projection.random(C, cfg.relational.dim, cfg.relational.projection_seed)


def _image_float(path):
    img = fileio.read_image(path)
    if img.ndim != 3:
        raise fileio.FormatError(f"{path}: expected a colour (P6) image")
    return img.astype(np.float64) / 255.0


# ---------------------------------------------------------------- checkpoints

def save_params(path, params: UpsamplerParams, cfg: RunConfig, seed):
    meta = {"ckpt.seed": seed, "ckpt.names": ",".join(params.names)}
    for line in dump_config(cfg).splitlines():
        k, _, v = line.partition(" = ")
        meta[k] = v
    fileio.write_checkpoint(path, params.arrays(), meta)


def load_params(path):
    """Returns (params, run config, seed) from a checkpoint."""
    from .numerics import Tensor

    arrays, meta = fileio.read_checkpoint(path)
    names = meta.pop("ckpt.names", "").split(",")
    seed = int(meta.pop("ckpt.seed", "0"))
    if len(names) != len(arrays):
        raise fileio.FormatError("checkpoint names do not match its tensors")
    cfg = parse_config("\n".join(f"{k} = {v}" for k, v in meta.items()))
    params = UpsamplerParams(names, [Tensor(a, requires_grad=True) for a in arrays])
    ucfg = cfg.train_config(seed).upsampler
    expected = UpsamplerParams.init(ucfg)
    if [a.shape for a in expected.arrays()] != [a.shape for a in arrays]:
        raise fileio.FormatError("checkpoint tensor shapes do not match its configuration")
    return params, cfg, seed


# ---------------------------------------------------------------- subcommands

def cmd_gen(args, cfg):
    """Dataset directory: per-sample image/labels/depth/boundary plus a manifest."""
    _need(args, "out")
    os.makedirs(args.out, exist_ok=True)
    lines = [f"# seed {args.seed}, streams 0x100 + index", f"count = {args.count}"]
    for i in range(args.count):
        s = gen_scene(Rng(args.seed, stream=0x100 + i), cfg.scene)
        stem = os.path.join(args.out, f"sample_{i:04d}")
        fileio.write_image(stem + "_image.ppm", s.image)
        fileio.write_image(stem + "_labels.pgm", s.labels.astype(np.uint8))
        fileio.write_fmap(stem + "_depth.fmap", s.depth[..., None])
        fileio.write_fmap(stem + "_boundary.fmap", s.boundary)
        lines.append(f"sample_{i:04d} = {args.seed}:{0x100 + i}")
    fileio.atomic_write_text(os.path.join(args.out, "manifest.txt"), "\n".join(lines) + "\n")
    fileio.atomic_write_text(os.path.join(args.out, "config.txt"), dump_config(cfg))
    return EXIT_OK


def cmd_featurize(args, cfg):
    _need(args, "image", "out")
    F = extract(_vfm(cfg, args.vfm), _image_float(args.image), stride=args.stride)
    fileio.write_fmap(args.out, F)
    return EXIT_OK


def cmd_relate(args, cfg):
    _need(args, "input", "out")
    F = fileio.read_fmap(args.input)
    field = relational_field(F, cfg.relational, _projection(cfg, F, args.vfm))
    os.makedirs(args.out, exist_ok=True)
    fileio.write_fmap(os.path.join(args.out, "entropy.fmap"), field.entropy[..., None])
    fileio.write_fmap(os.path.join(args.out, "spikiness.fmap"), field.spikiness[..., None])
    fileio.write_fmap(os.path.join(args.out, "com.fmap"), field.com)
    w = cfg.relational.window
    fileio.write_image(os.path.join(args.out, "entropy.pgm"), ek.entropy_image(field.entropy, math.log(w * w) if w > 1 else 0))
    fileio.write_image(os.path.join(args.out, "com.ppm"), ek.com_image(field.com))
    return EXIT_OK


def cmd_fuse(args, cfg):
    _need(args, "inputs", "out")
    feats = [fileio.read_fmap(p) for p in args.inputs]
    idx = args.vfms or [None] * len(feats)
    if len(idx) != len(feats):
        raise UsageError("--vfms must list one extractor index per input")
    projs = [_projection(cfg, F, i) for F, i in zip(feats, idx)]
    target = tuple(args.target) if args.target else feats[0].shape[:2]
    os.makedirs(args.out, exist_ok=True)
    if cfg.strategy == "mean":
        fields = source_fields(feats, projs, cfg.relational, target)
        fileio.write_fmap(os.path.join(args.out, "b_ens.fmap"), fuse_baseline_mean(np.stack([f.com for f in fields], 2)))
        return EXIT_OK
    cf = build_consensus(feats, projs, cfg.relational, cfg.fusion, target)
    fileio.write_fmap(os.path.join(args.out, "b_ens.fmap"), cf.b_ens)
    fileio.write_fmap(os.path.join(args.out, "alpha.fmap"), cf.alpha)
    fileio.write_fmap(os.path.join(args.out, "confidence.fmap"), cf.confidence)
    fileio.write_image(os.path.join(args.out, "selection.pgm"), ek.selection_image(cf.alpha))
    return EXIT_OK


def _write_trace(path, trace):
    rows = ["iteration,source_id,loss_rec,loss_guide,loss_total"]
    for it, sid, rec, guide, total in trace:
        g = "" if guide is None else f"{guide:.9e}"
        rows.append(f"{it},{sid},{rec:.9e},{g},{total:.9e}")
    fileio.atomic_write_text(path, "\n".join(rows) + "\n")


def _train(args, cfg):
    result = train(ek.train_scenes(cfg, args.seed), cfg.train_config(args.seed))
    os.makedirs(args.out, exist_ok=True)
    save_params(os.path.join(args.out, "checkpoint.duwt"), result.params, cfg, args.seed)
    _write_trace(os.path.join(args.out, "loss.csv"), result.trace)
    return result.params


def cmd_train(args, cfg):
    _need(args, "out")
    _train(args, cfg)
    return EXIT_OK


def cmd_upsample(args, cfg):
    _need(args, "checkpoint", "image", "input", "out")
    params, ccfg, seed = load_params(args.checkpoint)
    F_lr = fileio.read_fmap(args.input)
    image = _image_float(args.image)
    s = image.shape[0] // max(F_lr.shape[0], 1)
    from .numerics import no_grad

    with no_grad():
        F_hat = upsample(image, F_lr, params, ccfg.train_config(seed).upsampler, scale=s)
    fileio.write_fmap(args.out, F_hat.data)
    return EXIT_OK


def _report(args, cfg, params, name):
    rep = ek.evaluate(cfg, args.seed, params, "", name)
    text = ek.report_csv([rep])
    if args.out.endswith(".csv"):
        fileio.atomic_write_text(args.out, text)
    else:
        os.makedirs(args.out, exist_ok=True)
        fileio.atomic_write_text(os.path.join(args.out, "report.csv"), text)
    print(text, end="")


def cmd_probe(args, cfg):
    """Probe a checkpoint (or bilinear upsampling when none is given) on the probe scenes."""
    _need(args, "out")
    params = None
    if args.checkpoint:
        params, _, _ = load_params(args.checkpoint)
    _report(args, cfg, params, "trained" if params is not None else "bilinear")
    return EXIT_OK


def cmd_eval(args, cfg):
    """Full pipeline: generate scenes, train, probe, report."""
    _need(args, "out")
    params = _train(args, cfg)
    _report(args, cfg, params, "trained")
    return EXIT_OK


def cmd_ablate(args, cfg):
    _need(args, "out")
    seeds = args.seeds if args.seeds else [args.seed + i for i in range(5)]
    rep = ek.run_ablation(args.suite, cfg, seeds, workers=args.workers)
    os.makedirs(args.out, exist_ok=True)
    fileio.atomic_write_text(os.path.join(args.out, f"{args.suite}.csv"), rep.to_csv())
    fileio.atomic_write_text(os.path.join(args.out, f"{args.suite}.txt"), rep.table() + "\n")
    print(rep.table())
    return EXIT_OK


def cmd_viz(args, cfg):
    _need(args, "input", "out")
    F = fileio.read_fmap(args.input)
    kind = args.kind or {1: "entropy", 2: "com"}.get(F.shape[-1], "selection")
    if kind == "entropy":
        img = ek.entropy_image(F[..., 0])
    elif kind == "com":
        if F.shape[-1] != 2:
            raise NumericsError("COM visualisation needs a 2-channel map")
        img = ek.com_image(F)
    else:
        img = ek.selection_image(F if F.shape[-1] > 1 else F[..., 0])
    fileio.write_image(args.out, img)
    return EXIT_OK


def cmd_selftest(args, cfg):
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(seed=args.seed) else EXIT_SELFTEST


COMMANDS = {
    "gen": cmd_gen, "featurize": cmd_featurize, "relate": cmd_relate, "fuse": cmd_fuse,
    "train": cmd_train, "upsample": cmd_upsample, "probe": cmd_probe, "eval": cmd_eval,
    "ablate": cmd_ablate, "viz": cmd_viz, "selftest": cmd_selftest,
}


def build_parser():
    p = argparse.ArgumentParser(prog="relguide", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=(COMMANDS[name].__doc__ or name).splitlines()[0])
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output file or directory")
        if name == "gen":
            sp.add_argument("--count", type=int, default=8)
        if name == "featurize":
            sp.add_argument("--image", help="P6 image")
            sp.add_argument("--vfm", type=int, default=0)
            sp.add_argument("--stride", type=int)
        if name in ("relate", "upsample", "viz"):
            sp.add_argument("--input", help="FMAP feature map")
        if name == "relate":
            sp.add_argument("--vfm", type=int, help="extractor whose projection to use")
        if name == "fuse":
            sp.add_argument("--inputs", nargs="+")
            sp.add_argument("--vfms", nargs="+", type=int)
            sp.add_argument("--target", nargs=2, type=int, metavar=("H", "W"))
        if name in ("upsample", "probe"):
            sp.add_argument("--checkpoint")
        if name == "upsample":
            sp.add_argument("--image", help="P6 guidance image at the output resolution")
        if name == "ablate":
            sp.add_argument("--suite", choices=ek.SUITES, required=True)
            sp.add_argument("--seeds", nargs="+", type=int)
            sp.add_argument("--workers", type=int, default=1)
        if name == "viz":
            sp.add_argument("--kind", choices=("entropy", "com", "selection"))
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _load_cfg(args)
        cfg.train_config(args.seed)  # validates extractor indices early
        return COMMANDS[args.cmd](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fileio.FormatError, NumericsError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
