"""Command-line interface: fit, eval, render, prune, cluster, info, bench, replay.

Every command writes a JSON run manifest (next to its main output, to
``--manifest``, or to stderr) that ``replay`` can re-execute.

Exit codes: 0 success, 2 usage or input error, 3 data-format error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .brdf_data import (BidirSamples, GgxParams, Lambertian, MerlFormatError, SampleListError,
                        build_dataset, load_merl, load_svbrdf_dir, read_sample_list)
from .healpix import SphereCoord, HealpixGrid
from .metrics import DEFAULT_LIGHT, DirectionalLight, mae, read_pfm, render_sphere, rmse, ssim, \
    write_pfm, write_ppm
from .model import (ModelFormatError, benchmark_stages, cluster_materials, load,
                    load_codebook, save, section_sizes)
from .sphgrid import DomainError, compression_ratio, dense_parameter_count, prune
from .train import ModelConfig, NumericalError, TrainConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4
BENCH_QUERIES = 1920 * 1080


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ parsing
def parse_oracle(spec: str):
    """``ggx:alpha=0.3,albedo=0.5/0.35/0.2`` or ``lambertian:rho=0.5``.

    A bare ``alpha=0.3`` list means GGX. Vector values use ``/`` separators.
    """
    kind, sep, rest = spec.partition(":")
    if not sep:
        kind, rest = ("ggx", spec) if "=" in spec else (spec, "")
    kind = kind.strip().lower()
    kwargs = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise UsageError(f"bad oracle parameter {item!r} (expected key=value)")
        try:
            nums = tuple(float(v) for v in val.split("/"))
        except ValueError:
            raise UsageError(f"bad number in oracle parameter {item!r}") from None
        kwargs[key.strip()] = nums[0] if len(nums) == 1 else nums
    try:
        if kind == "ggx":
            ren = {"ax": "alpha_x", "ay": "alpha_y"}
            kw = {ren.get(k, k): v for k, v in kwargs.items()}
            for key in ("albedo", "f0"):
                if key in kw and not isinstance(kw[key], tuple):
                    kw[key] = (kw[key],) * 3
            return GgxParams(**kw)
        if kind == "lambertian":
            rho = kwargs.get("rho", 0.5)
            return Lambertian(rho if isinstance(rho, tuple) else (rho,) * 3)
    except TypeError as exc:
        raise UsageError(f"bad oracle spec {spec!r}: {exc}") from None
    raise UsageError(f"unknown oracle {kind!r} (use ggx or lambertian)")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    return p


def _directions(args) -> BidirSamples:
    if args.samples:
        return read_sample_list(_require(args.samples), require_rgb=False)
    if not args.dir:
        raise UsageError("no directions given (use --samples or --dir)")
    rows = []
    for i, text in enumerate(args.dir, 1):
        try:
            vals = [float(v) for v in text.replace(",", " ").split()]
        except ValueError:
            raise UsageError(f"--dir #{i}: not numbers: {text!r}") from None
        if len(vals) not in (4, 6):
            raise UsageError(f"--dir #{i}: expected 'theta_i phi_i theta_o phi_o [u v]'")
        rows.append(vals)
    if len({len(r) for r in rows}) != 1:
        raise UsageError("--dir entries mix rows with and without uv")
    a = np.array(rows)
    uv = a[:, 4:6] if a.shape[1] == 6 else None
    try:
        wi, wo = SphereCoord(a[:, 0], a[:, 1]), SphereCoord(a[:, 2], a[:, 3])
    except ValueError as exc:
        raise UsageError(f"--dir: {exc}") from None
    return BidirSamples(wi, wo, np.zeros((len(a), 3)), uv)


# ---------------------------------------------------------------- commands
def cmd_fit(args, run):
    mconf = _model_config(args)
    tconf = _train_config(args)
    source, label = _fit_source(args, run)
    log = (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None
    if args.svbrdf:
        train, held = source.split(args.split, tconf.seed)
    else:
        train, held = build_dataset(source, count=args.count, split=args.split, seed=tconf.seed,
                                    isotropic=mconf.isotropic)
    init = None
    if args.share:
        cb, cid = load_codebook(_require(args.share))
        run.inputs[str(args.share)] = _sha256(args.share)
        from .train import init_model
        init = init_model(mconf, tconf.seed, tconf.dtype, args.name or label)
        init.codebook, init.shared_codebook_id = cb, cid
        tconf = TrainConfig.from_mapping({**tconf.to_dict(), "train_codebook": False})
    model, report = fit(train, mconf, tconf, heldout=held, init=init,
                        name=args.name or label, log=log)
    if args.prune:
        model = model.copy()
        model.grid = prune(model.grid, *_model_dirs(model, train))
    out = Path(args.output)
    save(model, out, codebook_path=args.share)
    run.outputs.append(str(out))
    print(f"final_mse {report.final_mse:.6g}")
    if report.heldout_mse is not None:
        print(f"heldout_mse {report.heldout_mse:.6g}")
        print(f"heldout_log_mae {report.heldout_log_mae:.6g}")
    print(f"epochs {len(report.loss_trace)} final_loss {report.loss_trace[-1]:.6g} "
          f"wall_clock {report.wall_clock:.2f}s")
    if args.prune:
        print(f"kept_fraction {model.grid.kept_fraction:.4f}")
    run.config.update({"model": mconf.to_dict(), "train": tconf.to_dict()})
    run.seed = tconf.seed


def _model_dirs(model, data: BidirSamples):
    if model.isotropic:
        from .brdf_data import isotropic_reparam
        return isotropic_reparam(data.wi, data.wo)
    return data.wi, data.wo


def _fit_source(args, run):
    given = [a for a in ("merl", "ggx", "lambertian", "samples", "svbrdf") if getattr(args, a)]
    if len(given) != 1:
        raise UsageError("give exactly one data source: --merl, --ggx, --lambertian, "
                         "--samples or --svbrdf")
    kind = given[0]
    if kind == "merl":
        run.inputs[args.merl] = _sha256(_require(args.merl))
        return load_merl(args.merl), Path(args.merl).stem
    if kind == "samples":
        run.inputs[args.samples] = _sha256(_require(args.samples))
        return read_sample_list(args.samples), Path(args.samples).stem
    if kind == "svbrdf":
        _require(args.svbrdf)
        return load_svbrdf_dir(args.svbrdf), Path(args.svbrdf).name
    if kind == "ggx":
        return parse_oracle("ggx:" + args.ggx), "ggx"
    return parse_oracle("lambertian:rho=" + args.lambertian.replace(",", "/")), "lambertian"


def _model_config(args) -> ModelConfig:
    base = ModelConfig.from_file(args.config).to_dict() if args.config else {}
    for key in ("nside", "k", "bitwidth", "output_transform"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    if args.no_quantize:
        base["quantize"] = False
    if args.isotropic:
        base["isotropic"] = True
    if args.texture:
        base["texture_shape"] = tuple(int(s) for s in args.texture.split(","))
    return ModelConfig.from_mapping(base)


def _train_config(args) -> TrainConfig:
    base = TrainConfig.from_file(args.config).to_dict() if args.config else {}
    for key in ("epochs", "batch_size", "lr", "seed", "loss", "dtype"):
        if getattr(args, key) is not None:
            base[key] = getattr(args, key)
    return TrainConfig.from_mapping(base)


def _load_model(args, run):
    run.inputs[args.model] = _sha256(_require(args.model))
    if getattr(args, "codebook", None):
        run.inputs[args.codebook] = _sha256(_require(args.codebook))
    return load(args.model, codebook=getattr(args, "codebook", None))


def cmd_eval(args, run):
    model = _load_model(args, run)
    data = _directions(args)
    if args.samples:
        run.inputs[args.samples] = _sha256(args.samples)
    rgb = model.eval(data.wi, data.wo, data.uv)
    oracle = parse_oracle(args.compare) if args.compare else None
    ref = oracle.eval(data.wi, data.wo) if oracle is not None else None
    for i, row in enumerate(rgb):
        line = " ".join(f"{v:.9g}" for v in row)
        if ref is not None:
            line += " | ref " + " ".join(f"{v:.9g}" for v in ref[i])
            line += f" | abs_err {np.mean(np.abs(row - ref[i])):.6g}"
        print(line)
    if ref is not None:
        print(f"MAE {mae(rgb, ref):.6g} RMSE {rmse(rgb, ref):.6g} N {len(rgb)}")


def cmd_render(args, run):
    if (args.model is None) == (args.oracle is None):
        raise UsageError("render needs exactly one of MODEL or --oracle")
    if args.size < 1:
        raise UsageError("--size must be >= 1")
    brdf = _load_model(args, run) if args.model else parse_oracle(args.oracle)
    light = DirectionalLight.parse(args.light) if args.light else DEFAULT_LIGHT
    uv = None
    if getattr(brdf, "texture", None) is not None:
        uv = tuple(float(s) for s in (args.uv or "0.5,0.5").split(","))
    img = render_sphere(brdf, light, args.size, uv=uv)
    out = Path(args.output)
    write_ppm(img, out, args.exposure)
    side = out.with_suffix(".pfm")
    write_pfm(img, side)
    run.outputs += [str(out), str(side)]
    print(f"wrote {out} and {side}")
    if args.metrics:
        ref = read_pfm(_require(args.metrics))
        run.inputs[args.metrics] = _sha256(args.metrics)
        if ref.shape != img.shape:
            raise UsageError(f"reference is {ref.shape[1]}x{ref.shape[0]}, "
                             f"render is {img.shape[1]}x{img.shape[0]}")
        print(f"MAE {mae(ref, img):.6g} RMSE {rmse(ref, img):.6g} "
              f"SSIM {ssim(ref, img):.6f} (higher is better)")
    run.config.update({"light": list(light.direction), "intensity": light.intensity})


def cmd_prune(args, run):
    model = _load_model(args, run)
    data = read_sample_list(_require(args.samples), require_rgb=False)
    run.inputs[args.samples] = _sha256(args.samples)
    model = model.copy()
    model.grid = prune(model.grid, *_model_dirs(model, data))
    out = Path(args.output)
    save(model, out)
    run.outputs.append(str(out))
    print(f"kept_fraction {model.grid.kept_fraction:.4f}")


def cmd_cluster(args, run):
    sources = []
    for item in args.materials:
        if Path(item).exists():
            run.inputs[item] = _sha256(item)
            sources.append(load_merl(item))
        else:
            sources.append(parse_oracle(item))
    labels = cluster_materials(sources, args.m, seed=args.seed)
    for item, lab in zip(args.materials, labels):
        print(f"{lab} {item}")
    run.seed = args.seed


def cmd_info(args, run):
    model = _load_model(args, run)
    g = model.grid
    hp = HealpixGrid(model.nside) if model.nside != g.nside else g.grid
    print(f"name {model.name or '-'}")
    print(f"nside {model.nside} k {model.k} b {model.bitwidth} "
          f"quantized {model.quantized} isotropic {model.isotropic} "
          f"transform {model.output_transform}")
    print(f"pixels {hp.pixel_count} sphere_vertices {hp.vertex_count_full} "
          f"hemisphere_n {g.n} grid_positions {g.size}")
    kept = int(g.keep_mask.sum()) if g.keep_mask is not None else g.size
    print(f"kept_vertices {kept}/{g.size} ({100.0 * g.kept_fraction:.2f}%)")
    if model.texture is not None:
        print("texture {}x{}x{}".format(*model.texture.shape))
    if model.shared_codebook_id:
        print(f"shared_codebook {model.shared_codebook_id}")
    for name, size in section_sizes(model).items():
        print(f"section {name} {size} bytes")
    print(f"dense_parameters {dense_parameter_count(model.nside, model.k)}")
    print(f"compression_ratio {compression_ratio(model.nside, model.k, model.bitwidth):.4f}")


def cmd_bench(args, run):
    model = _load_model(args, run)
    rng = np.random.default_rng(args.seed)
    n = args.queries
    wi = SphereCoord(np.arccos(rng.uniform(0, 1, n)), rng.uniform(0, 2 * np.pi, n))
    wo = SphereCoord(np.arccos(rng.uniform(0, 1, n)), rng.uniform(0, 2 * np.pi, n))
    benchmark_stages(model, wi[:16], wo[:16])  # warm-up: JIT compile, page in tables
    runs = [benchmark_stages(model, wi, wo) for _ in range(args.repeats)]
    med = {k: float(np.median([r[k] for r in runs])) for k in runs[0]}
    print(f"queries {n} repeats {args.repeats} (median, single process, CPU)")
    for stage in ("ang2pix", "gather", "mlp", "total"):
        t = med[stage]
        print(f"{stage:8s} {1e3 * t:10.2f} ms {n / t:14.4g} queries/s")
    # ang2pix runs once per direction, two directions per query
    print(f"ang2pix_lookups_per_s {2 * n / med['ang2pix']:.4g}")
    run.config.update({"queries": n, "repeats": args.repeats, "median_seconds": med})
    run.seed = args.seed


def cmd_replay(args, run):
    manifest = json.loads(_require(args.manifest).read_text())
    argv = manifest.get("argv")
    if not argv or argv[0] == "replay":
        raise UsageError(f"{args.manifest}: manifest has no replayable command")
    for path, digest in manifest.get("inputs", {}).items():
        if not Path(path).exists() or _sha256(path) != digest:
            print(f"warning: input {path} differs from the recorded hash", file=sys.stderr)
    return main(argv)


# ------------------------------------------------------------------ parser
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="neubrdf", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--manifest", help="write the run manifest here")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="train a model from measured or analytic data")
    f.add_argument("--merl", help="MERL binary file")
    f.add_argument("--ggx", metavar="SPEC", help="analytic GGX, e.g. alpha=0.3")
    f.add_argument("--lambertian", metavar="RHO", help="analytic Lambertian albedo")
    f.add_argument("--samples", help="sample list (theta_i phi_i theta_o phi_o r g b [u v])")
    f.add_argument("--svbrdf", help="directory with manifest.txt of per-texel sample lists")
    f.add_argument("--config", help="key = value config file (flags override it)")
    f.add_argument("--nside", type=int)
    f.add_argument("--k", type=int)
    f.add_argument("--bitwidth", "-b", type=int)
    f.add_argument("--output-transform", choices=("log1p", "none"))
    f.add_argument("--no-quantize", action="store_true", help="free features, no codebook")
    f.add_argument("--isotropic", action="store_true")
    f.add_argument("--texture", metavar="H,W,C", help="attach a neural texture")
    f.add_argument("--epochs", type=int)
    f.add_argument("--batch-size", type=int)
    f.add_argument("--lr", type=float)
    f.add_argument("--seed", type=int)
    f.add_argument("--loss", choices=("log_l1", "log_l2", "l1", "l2"))
    f.add_argument("--dtype", choices=("float32", "float64"))
    f.add_argument("--count", type=int, default=200_000, help="samples drawn from oracles")
    f.add_argument("--split", type=float, default=0.9, help="training fraction")
    f.add_argument("--prune", action="store_true", help="prune unsupervised vertices")
    f.add_argument("--share", metavar="CODEBOOK", help="train against a frozen shared codebook")
    f.add_argument("--name", default="")
    f.add_argument("--verbose", "-v", action="store_true")
    f.add_argument("-o", "--output", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="evaluate a model at given directions")
    e.add_argument("model")
    e.add_argument("--codebook")
    e.add_argument("--samples", help="direction list")
    e.add_argument("--dir", action="append", metavar="'TI PI TO PO [U V]'")
    e.add_argument("--compare", metavar="ORACLE", help="e.g. ggx:alpha=0.3")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a lit sphere preview")
    r.add_argument("model", nargs="?")
    r.add_argument("--codebook")
    r.add_argument("--oracle", help="render an analytic BRDF instead of a model")
    r.add_argument("--light", help="x,y,z[@intensity]")
    r.add_argument("--size", type=int, default=256)
    r.add_argument("--exposure", type=float, default=1.0)
    r.add_argument("--uv", help="surface coordinate for textured models")
    r.add_argument("--metrics", metavar="REF.pfm", help="compare against a float render")
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_render)

    pr = sub.add_parser("prune", help="drop vertices no listed direction supervises")
    pr.add_argument("model")
    pr.add_argument("--codebook")
    pr.add_argument("--samples", required=True)
    pr.add_argument("-o", "--output", required=True)
    pr.set_defaults(func=cmd_prune)

    c = sub.add_parser("cluster", help="group materials by K-means")
    c.add_argument("materials", nargs="+", help="MERL files or oracle specs")
    c.add_argument("--m", type=int, required=True)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_cluster)

    i = sub.add_parser("info", help="summarise a model file")
    i.add_argument("model")
    i.add_argument("--codebook")
    i.set_defaults(func=cmd_info)

    b = sub.add_parser("bench", help="time the evaluation stages")
    b.add_argument("model")
    b.add_argument("--codebook")
    b.add_argument("--queries", type=int, default=BENCH_QUERIES)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    rp.set_defaults(func=cmd_replay)
    return p


class _Run:
    def __init__(self, argv):
        self.argv = list(argv)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.config: dict = {}
        self.seed = None

    def manifest(self, args, wall: float, status: int) -> dict:
        opts = {k: v for k, v in vars(args).items() if k not in ("func",)}
        return {"command": args.command, "argv": self.argv, "options": opts,
                "config": self.config, "seed": self.seed, "inputs": self.inputs,
                "outputs": self.outputs, "wall_clock": wall, "exit_code": status,
                "version": __version__}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    run = _Run(argv)
    start = time.perf_counter()
    status = EXIT_OK
    try:
        result = args.func(args, run)
        if args.command == "replay":
            return result
    except (UsageError, FileNotFoundError, SampleListError, DomainError) as exc:
        status = _fail(EXIT_USAGE, exc)
    except (MerlFormatError, ModelFormatError) as exc:
        status = _fail(EXIT_FORMAT, exc)
    except (NumericalError, FloatingPointError) as exc:
        status = _fail(EXIT_NUMERIC, exc)
    except ValueError as exc:
        status = _fail(EXIT_USAGE, exc)
    _write_manifest(args, run.manifest(args, time.perf_counter() - start, status))
    return status


def _fail(code: int, exc: Exception) -> int:
    msg = f"no such file: {exc.args[0] if exc.args else exc}" if isinstance(
        exc, FileNotFoundError) else str(exc)
    print(f"neubrdf: error: {msg}", file=sys.stderr)
    return code


def _write_manifest(args, manifest: dict) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True, default=str)
    if args.manifest:
        Path(args.manifest).write_text(text + "\n")
    elif manifest["outputs"]:
        Path(manifest["outputs"][0] + ".manifest.json").write_text(text + "\n")
    else:
        print("manifest " + json.dumps(manifest, sort_keys=True, default=str), file=sys.stderr)


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
