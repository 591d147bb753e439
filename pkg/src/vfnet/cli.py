"""Command-line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .config import load_config
from .errors import ConfigError, PreconditionError, SaturationError, TrainingDivergedError, VFNetError
from .generation import (SOURCES, complete_shape, evaluate_completion, generate_mesh, interpolate, linear_probe,
                         posterior_mean, sample_cloud)
from .metrics import BASES, chamfer, directional_chamfer, emd_exact, evaluate_sets
from .pointcloud import (FAMILIES, knn_remove_hole, load_directory, load_point_cloud, prepare, save_point_cloud,
                         synth_dataset)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("vfnet")


class UsageError(Exception):
    pass


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(artifact: Path, args, extra: dict | None = None):
    """Stamp seed and checkpoint hash next to an artifact."""
    meta = {"command": args.command, "seed": getattr(args, "seed", None)}
    ck = getattr(args, "checkpoint", None)
    if ck is not None:
        meta["checkpoint"] = str(ck)
        meta["checkpoint_sha256"] = file_sha256(ck)
    meta.update(extra or {})
    _write_json(artifact.with_name(artifact.name + ".json"), meta)


def _model(args):
    return load_checkpoint(args.checkpoint).model


def _load_set(directory, points, rng):
    try:
        items = load_directory(directory)
    except FileNotFoundError:
        raise UsageError(f"directory not found: {directory}") from None
    if not items:
        raise UsageError(f"no .xyz/.ply clouds in {directory}")
    return [(name, prepare(pc, points, rng)) for name, pc in items]


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ commands


def cmd_synth(args):
    out = _outdir(args.out)
    families = tuple(args.families.split(","))
    unknown = set(families) - set(FAMILIES)
    if unknown:
        raise UsageError(f"unknown families {sorted(unknown)}; choose from {FAMILIES}")
    clouds = synth_dataset(args.count, args.seed, families=families, grid_resolution=args.resolution)
    rows = []
    for i, pc in enumerate(clouds):
        name = f"patch_{i:04d}.xyz"
        save_point_cloud(pc, out / name)
        rows.append(f"{name},{pc.label}")
    (out / "labels.csv").write_text("name,label\n" + "\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {len(clouds)} patches to {out}")


def cmd_train(args):
    from .training import train

    overrides = dict(kv.split("=", 1) for kv in args.set)
    overrides = {k.strip(): v.strip() for k, v in overrides.items()}
    overrides["train.seed"] = str(args.seed)
    if args.out:
        overrides["output.dir"] = str(Path(args.out).resolve())
    cfg = load_config(args.config, overrides)
    if cfg.data_dir is None or not cfg.data_dir.is_dir():
        raise ConfigError("data.dir", f"dataset directory not found: {cfg.data_dir}")
    if cfg.output_dir is None:
        raise ConfigError("output.dir", "no output directory configured")
    out = _outdir(cfg.output_dir)
    cfg.dump(out / "resolved.cfg")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.train.seed, 1]))
    data = [pc for _, pc in _load_set(cfg.data_dir, cfg.points, rng)]
    log_path = out / "train_log.jsonl"
    with log_path.open("w", encoding="utf-8") as fh:
        def on_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            if args.verbose:
                print(json.dumps(rec), file=sys.stderr)

        try:
            ck = train(data, cfg.train, on_epoch)
        except TrainingDivergedError as e:
            if e.checkpoint is not None:
                save_checkpoint(e.checkpoint, out / "checkpoint.partial.vfn")
            raise
    digest = save_checkpoint(ck, out / "checkpoint.vfn")
    print(json.dumps({"checkpoint": str(out / "checkpoint.vfn"), "sha256": digest, "log": str(log_path)}))


def _summary(reports):
    keys = ("mmd", "cov", "one_nna")
    vals = np.array([[r.to_dict()[k] for k in keys] for r in reports])
    return {
        "runs": [r.to_dict() for r in reports],
        "mean": dict(zip(keys, vals.mean(axis=0).tolist())),
        "sd": dict(zip(keys, vals.std(axis=0, ddof=1).tolist() if len(reports) > 1 else [0.0] * 3)),
    }


def cmd_evaluate(args):
    if (args.gen is None) == (args.sample is None):
        raise UsageError("give exactly one of --gen DIR or --sample N")
    if args.sample is not None and args.checkpoint is None:
        raise UsageError("--sample needs --checkpoint")
    reports = []
    for k in range(args.seeds):
        seed = args.seed + k
        rng = np.random.default_rng(seed)
        ref = [pc for _, pc in _load_set(args.ref, args.points, rng)]
        if args.gen is not None:
            gen = [pc for _, pc in _load_set(args.gen, args.points, rng)]
        else:
            model = _model(args)
            n = args.points or len(ref[0])
            gen = [sample_cloud(model, n, args.source, args.noise, rng) for _ in range(args.sample)]
        if args.metric == "emd":
            sizes = {len(pc) for pc in gen + ref}
            if len(sizes) > 1:
                raise UsageError(f"--metric emd needs equal cardinalities, got sizes {sorted(sizes)}")
        reports.append(evaluate_sets(gen, ref, args.metric, seed, args.threads))
    payload = reports[0].to_dict() if len(reports) == 1 else _summary(reports)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    print(text)


def cmd_reconstruct(args):
    model = _model(args)
    out = _outdir(args.out)
    rng = np.random.default_rng(args.seed)
    rows = []
    for name, pc in _load_set(args.input, args.points, rng):
        rec = model.reconstruct(pc.points).astype(np.float64)
        save_point_cloud(rec, out / (Path(name).stem + ".xyz"))
        cd = chamfer(pc, rec)
        emd = emd_exact(pc, rec)[0] / len(pc) if len(pc) <= args.emd_cap else float("nan")
        rows.append((name, cd, emd, max(directional_chamfer(pc, rec), directional_chamfer(rec, pc))))
    lines = ["name\tchamfer\temd"] + [f"{n}\t{c:.6g}\t{e:.6g}" for n, c, e, _ in rows]
    cds, emds = np.array([r[1] for r in rows]), np.array([r[2] for r in rows])
    lines.append(f"mean\t{cds.mean():.6g}\t{np.mean(emds):.6g}")
    table = "\n".join(lines) + "\n"
    (out / "reconstruct.tsv").write_text(table, encoding="utf-8")
    _sidecar(out / "reconstruct.tsv", args, {"points": args.points})
    print(table, end="")


def cmd_sample(args):
    model = _model(args)
    out = _outdir(args.out)
    rng = np.random.default_rng(args.seed)
    for i in range(args.count):
        pc = sample_cloud(model, args.n, args.source, args.noise, rng)
        path = out / f"sample_{i:03d}.xyz"
        save_point_cloud(pc, path)
        _sidecar(path, args, {"index": i, "source": args.source, "noise": args.noise})
    print(f"wrote {args.count} samples to {out}")


def cmd_mesh(args):
    model = _model(args)
    if args.input is not None:
        z = posterior_mean(model, prepare(load_point_cloud(args.input), None, np.random.default_rng(0)))
    elif args.seed is not None:
        z = model.flow.sample(np.random.default_rng(args.seed), 1)[0]
    else:
        raise UsageError("mesh needs --input CLOUD or --seed (to sample a code from the prior)")
    mesh = generate_mesh(model, z, args.resolution)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    mesh.save_obj(path)
    _sidecar(path, args, {"resolution": args.resolution, "input": args.input})
    print(f"{path}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")


def cmd_complete(args):
    model = _model(args)
    out = _outdir(args.out)
    rng = np.random.default_rng(args.seed)
    pc = prepare(load_point_cloud(args.input), args.points, rng)
    extra = {"factor": args.factor, "hole_size": args.hole_size, "occupancy_resolution": args.resolution}
    if args.hole_size > 0:
        if args.hole_size >= len(pc):
            raise UsageError(f"--hole-size {args.hole_size} leaves no partial cloud ({len(pc)} points)")
        seed_index = int(rng.integers(len(pc)))
        partial, removed = knn_remove_hole(pc, seed_index, args.hole_size)
        save_point_cloud(removed, out / "removed.xyz")
        save_point_cloud(partial, out / "partial.xyz")
    else:
        removed, partial = None, pc
    completion = complete_shape(model, partial, args.factor, args.resolution, rng, fallback=not args.no_fallback)
    path = out / "completion.xyz"
    save_point_cloud(completion, path)
    if removed is not None:
        extra["completion_to_removed"] = evaluate_completion(completion, removed)
        extra["partial_to_removed"] = evaluate_completion(partial, removed)
    extra["generated_points"] = len(completion)
    _sidecar(path, args, extra)
    print(json.dumps(extra, sort_keys=True))


def cmd_interpolate(args):
    model = _model(args)
    out = _outdir(args.out)
    rng = np.random.default_rng(0)
    a = prepare(load_point_cloud(args.a), None, rng)
    b = prepare(load_point_cloud(args.b), None, rng)
    meshes = interpolate(model, a, b, args.steps, args.resolution)
    for i, mesh in enumerate(meshes):
        path = out / f"interp_{i:02d}.obj"
        mesh.save_obj(path)
        _sidecar(path, args, {"step": i, "steps": args.steps, "resolution": args.resolution})
    print(f"wrote {len(meshes)} meshes to {out}")


def cmd_probe(args):
    model = _model(args)
    rng = np.random.default_rng(args.seed)
    items = _load_set(args.input, args.points, rng)
    labels = [pc.label for _, pc in items]
    if any(lab is None for lab in labels):
        raise UsageError(f"{args.input}: every cloud needs a label in labels.csv")
    latents = np.stack([posterior_mean(model, pc) for _, pc in items])
    acc = linear_probe(latents, labels, args.train_fraction, args.seed)
    print(json.dumps({"accuracy": acc, "clouds": len(items), "classes": len(set(labels))}))


def cmd_check(args):
    from .flow import FlowPrior
    from .model import ModelConfig, VFNet
    from .training import elbo_gradient_check

    rng = np.random.default_rng(args.seed)
    cfg = ModelConfig(latent_dim=4, encoder_widths=(16, 16), encoder_head=(16,), projector_widths=(16,),
                      decoder_widths=(16, 16), variance_widths=(8,), grid_widths=(8,), flow_hidden=8)
    model = VFNet(cfg, rng=rng, dtype=np.float64)
    X = np.stack([prepare(c, 32, rng).points for c in synth_dataset(3, args.seed)])
    results = {}
    rep = elbo_gradient_check(model, X, rng.standard_normal((3, 4)), 0.5, rng=rng)
    results["elbo_gradients"] = (rep.passed, f"max relative error {rep.max_error:.2e}")

    flow = FlowPrior(4, rng=rng, dtype=np.float64, identity=False)
    u = rng.standard_normal((16, 4))
    z, _ = flow.forward(u)
    back, _ = flow.inverse(z)
    err = float(np.abs(back - u).max())
    results["flow_inverse"] = (err < 1e-6, f"max roundtrip error {err:.2e}")

    pts = X[0]
    perm = rng.permutation(len(pts))
    m32 = model.astype(np.float32)
    same = np.array_equal(m32.encode(pts)[0], m32.encode(pts[perm])[0])
    results["permutation_invariance"] = (same, "bit-identical" if same else "differs")

    ok = all(p for p, _ in results.values())
    for name, (passed, detail) in results.items():
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vfnet", description="Variational folding point-cloud autoencoder toolkit.")
    p.add_argument("--version", action="version", version=f"vfnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch records and debug output")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, seed="required"):
        sp = sub.add_parser(name, help=help)
        sp.set_defaults(func=fn)
        if seed == "required":
            sp.add_argument("--seed", type=int, required=True, help="seed for every stochastic step")
        elif seed == "optional":
            sp.add_argument("--seed", type=int, default=None)
        return sp

    def ckpt(sp, required=True):
        sp.add_argument("--checkpoint", type=Path, required=required)

    sp = add("synth", cmd_synth, "write a synthetic patch dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=200)
    sp.add_argument("--resolution", type=int, default=32, help="grid resolution of each patch")
    sp.add_argument("--families", default="dome,bowl,saddle,ridge")

    sp = add("train", cmd_train, "train a model from a config file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", help="output directory (overrides output.dir)")
    sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")

    sp = add("evaluate", cmd_evaluate, "MMD / COV / 1-NNA between generated and reference sets")
    ckpt(sp, required=False)
    sp.add_argument("--gen")
    sp.add_argument("--sample", type=int, help="generate N clouds from the checkpoint instead of --gen")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--metric", choices=BASES, default="chamfer")
    sp.add_argument("--points", type=int, help="subsample and normalize every cloud to this many points")
    sp.add_argument("--source", choices=SOURCES, default="grid_predictor")
    sp.add_argument("--noise", action="store_true")
    sp.add_argument("--seeds", type=int, default=1, help="repeat with seeds seed..seed+k-1, report mean and sd")
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--out", help="also write the report JSON here")

    sp = add("reconstruct", cmd_reconstruct, "per-cloud Chamfer / EMD of reconstructions")
    ckpt(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", type=int)
    sp.add_argument("--emd-cap", type=int, default=1024)

    sp = add("sample", cmd_sample, "sample new clouds from the prior")
    ckpt(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=2048, help="points per cloud")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--source", choices=SOURCES, default="uniform_grid")
    sp.add_argument("--noise", action="store_true")

    sp = add("mesh", cmd_mesh, "decode a mesh from a cloud's code or a prior sample", seed="optional")
    ckpt(sp)
    sp.add_argument("--input")
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--out", required=True)

    sp = add("complete", cmd_complete, "complete a partial cloud (optionally cutting a synthetic hole)")
    ckpt(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--points", type=int)
    sp.add_argument("--hole-size", type=int, default=0)
    sp.add_argument("--factor", type=float, default=3.0)
    sp.add_argument("--resolution", type=int, default=32, help="occupancy grid resolution")
    sp.add_argument("--no-fallback", action="store_true")

    sp = add("interpolate", cmd_interpolate, "meshes along the line between two codes", seed="none")
    ckpt(sp)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--steps", type=int, default=8)
    sp.add_argument("--resolution", type=int, default=32)
    sp.add_argument("--out", required=True)

    sp = add("probe", cmd_probe, "linear probe accuracy on labelled latents")
    ckpt(sp)
    sp.add_argument("--input", required=True)
    sp.add_argument("--points", type=int)
    sp.add_argument("--train-fraction", type=float, default=0.7)

    sp = add("check", cmd_check, "gradient and invariant self-tests", seed="optional")
    sp.set_defaults(seed=0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        code = args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, SaturationError, ArithmeticError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (VFNetError, PreconditionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
