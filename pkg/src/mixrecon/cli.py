"""Command-line entry points: train, reconstruct, eval, info.

Exit codes: 0 on success, 2 for usage/configuration/input problems, 3 for
numerical failures during training. All primary outputs (configs, loss
logs, checkpoints, meshes, metric records) are byte-deterministic for
identical inputs and seeds; wall-clock timings go to a separate sidecar
file.

Heavy imports happen inside the command handlers so that --threads (or
MIXRECON_THREADS) can cap the BLAS thread pools before numpy first loads.
"""

import argparse
import dataclasses
import os
import re
import sys
from pathlib import Path

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)

FULL_SCALE_REFERENCE_PARAMS = 6_500_000


class CliError(Exception):
    """Input problem surfaced to the user; maps to exit code 2."""


def _cap_threads(n):
    for var in _THREAD_VARS:
        os.environ[var] = str(n)


def _resolve_threads(value):
    if value is None:
        value = os.environ.get("MIXRECON_THREADS")
        if value is None:
            return None
        if not value.isdigit() or int(value) < 1:
            raise CliError(f"MIXRECON_THREADS must be a positive integer, got {value!r}")
        value = int(value)
    if value < 1:
        raise CliError("--threads must be >= 1")
    return value


def _load_config(args, fallback=None):
    from . import config as cf

    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        return cf.load_config(path)
    if getattr(args, "preset", None):
        return cf.preset(args.preset)
    if fallback is not None:
        if not fallback.exists():
            raise CliError(
                f"no config given and none found beside the checkpoint: {fallback}"
            )
        return cf.load_config(fallback)
    return cf.default_config()


def _read_cloud(path):
    from . import fileio

    path = Path(path)
    if not path.exists():
        raise CliError(f"input cloud not found: {path}")
    ext = path.suffix.lower()
    if ext == ".xyz":
        return fileio.read_xyz(path)
    if ext == ".ply":
        return fileio.read_ply(path)[0]
    if ext == ".obj":
        return fileio.read_obj(path)[0]
    raise CliError(f"unsupported point-cloud format '{ext}' (use .xyz, .ply, or .obj)")


# ---------------------------------------------------------------------------
# train

def cmd_train(args):
    from . import config as cf
    from . import losses_train as lt
    from . import shapegen as sg

    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cf.dump_config(cfg), encoding="utf-8")

    params, net, decoder = cf.build_model(cfg)
    dataset = sg.ProceduralDataset(cfg.data, split="train")
    checkpoint = out / "checkpoint.mxrc"

    resume_state = None
    if args.resume:
        if not checkpoint.exists():
            raise CliError(f"cannot resume: no checkpoint at {checkpoint}")
        resume_state = lt.load_training_checkpoint(checkpoint, params)
        print(f"resuming from iteration {resume_state.step}")

    result = lt.train(
        dataset,
        net,
        decoder,
        params,
        cfg.train,
        log_path=out / "loss_log.txt",
        checkpoint_path=checkpoint,
        resume_state=resume_state,
        progress=lambda r: print(
            f"iteration {r.iteration}/{cfg.train.iterations}  "
            f"rec {r.l_rec:.5f}  den {r.l_den:.5f}",
            flush=True,
        ),
    )
    (out / "run_meta.txt").write_text(f"seconds {result.seconds:.3f}\n", encoding="utf-8")
    print(f"trained to iteration {result.state.step}; checkpoint at {checkpoint}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct

def cmd_reconstruct(args):
    from . import config as cf
    from . import extract as ex
    from . import fileio
    from . import losses_train as lt

    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CliError(f"checkpoint not found: {ckpt}")
    cfg = _load_config(args, fallback=ckpt.parent / "config.yaml")

    points = _read_cloud(args.input)
    params, net, decoder = cf.build_model(cfg)
    try:
        lt.load_training_checkpoint(ckpt, params)
    except lt.TrainingError as e:
        raise CliError(f"incompatible checkpoint {ckpt}: {e}") from e

    resolution = args.res if args.res is not None else cfg.extract.resolution
    mesh = ex.reconstruct_mesh(
        net,
        decoder,
        points,
        resolution,
        chunk=cfg.extract.chunk,
        iso=cfg.extract.iso,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    mesh.save(out)
    print(f"wrote {out}: {mesh.vertices.shape[0]} vertices, {len(mesh)} triangles")

    if args.emit_denoised:
        denoised = net.denoise(points).denoised.data
        side = out.with_name(out.stem + "_denoised.xyz")
        fileio.write_xyz(side, denoised)
        print(f"wrote {side}: {denoised.shape[0]} points")
    return 0


# ---------------------------------------------------------------------------
# eval

_MESH_EXTS = {".obj", ".ply"}


def _prediction_files(pred):
    path = Path(pred)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _MESH_EXTS)
        if not files:
            raise CliError(f"no .obj/.ply meshes found in {path}")
        return files
    if not path.exists():
        raise CliError(f"prediction not found: {path}")
    return [path]


def _shape_index(path):
    """Shape index from a filename: the last run of digits in the stem."""
    runs = re.findall(r"\d+", path.stem)
    return int(runs[-1]) if runs else 0


def cmd_eval(args):
    import numpy as np

    from . import config as cf
    from . import evalsuite as ev
    from . import extract as ex
    from . import shapegen as sg

    preds = _prediction_files(args.pred)
    gt_path = Path(args.gt)
    if not gt_path.exists():
        raise CliError(f"ground truth not found: {gt_path}")

    if gt_path.suffix.lower() in (".yaml", ".yml"):
        cfg = cf.load_config(gt_path)
        samples = args.samples if args.samples is not None else cfg.eval.samples
        tau = args.tau if args.tau is not None else cfg.eval.tau
        seed = cfg.eval.seed
        need = max(_shape_index(p) for p in preds) + 1
        dataset = sg.ProceduralDataset(
            dataclasses.replace(cfg.data, num_shapes=need), split=args.split
        )

        def gt_samples(path):
            idx = _shape_index(path)
            pts, nrm = dataset.shape(idx).sample_surface(
                np.random.default_rng([seed, idx]), samples, return_normals=True
            )
            return ev.SurfaceSampleSet(pts, nrm)

    elif gt_path.suffix.lower() in _MESH_EXTS:
        samples = args.samples if args.samples is not None else 10000
        tau = args.tau if args.tau is not None else 0.01
        seed = 0
        gt_mesh = ex.TriangleMesh.load(gt_path)

        def gt_samples(path):
            return ev.sample_mesh(gt_mesh, samples, seed)

    else:
        raise CliError(
            f"ground truth must be a mesh (.obj/.ply) or a config (.yaml): {gt_path}"
        )

    reports = []
    degenerate = []
    for path in preds:
        shape_id = path.stem
        mesh = ex.TriangleMesh.load(path)
        try:
            pred_set = ev.sample_mesh(mesh, samples, seed)
        except ValueError:
            degenerate.append(path)
            print(f"{shape_id} degenerate")
            continue
        report = ev.compare_surfaces(gt_samples(path), pred_set, tau=tau)
        reports.append(report)
        print(report.record(shape_id))

    if reports:
        mean = ev.mean_report(reports)
        print(mean.record("mean"))
        print(f"scaled cd1x1e2 {mean.cd1_scaled:.10g} cd2x1e4 {mean.cd2_scaled:.10g}")
    if degenerate and args.strict:
        raise CliError(f"{len(degenerate)} degenerate prediction(s), e.g. {degenerate[0]}")
    return 0


# ---------------------------------------------------------------------------
# info

def cmd_info(args):
    from . import config as cf
    from . import diffcore as dc
    from . import losses_train as lt

    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists():
            raise CliError(f"checkpoint not found: {path}")
        arrays = dc.load_checkpoint(path)
        step = arrays.get(f"{lt.OPT_PREFIX}step")
        if step is not None:
            print(f"optimizer step: {int(step.reshape(-1)[0])}")
        model = {
            n: a for n, a in arrays.items() if not n.startswith(lt.OPT_PREFIX)
        }
        counts = {}
        for name, arr in sorted(model.items()):
            print(f"{name}  {'x'.join(map(str, arr.shape)) or 'scalar'}")
            prefix = name.split(".", 1)[0]
            counts[prefix] = counts.get(prefix, 0) + arr.size
        total = sum(counts.values())
    else:
        cfg = _load_config(args)
        params, _, _ = cf.build_model(cfg)
        for name, tensor in sorted(params.items()):
            print(f"{name}  {'x'.join(map(str, tensor.data.shape)) or 'scalar'}")
        counts = params.count_by_prefix()
        total = lt.parameter_count(params)
        print("--- resolved config ---")
        sys.stdout.write(cf.dump_config(cfg))

    print("--- parameter counts ---")
    for prefix in sorted(counts):
        print(f"{prefix}: {counts[prefix]}")
    print(f"total: {total}")
    print(f"full-scale reference total: {FULL_SCALE_REFERENCE_PARAMS}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mixrecon",
        description="Implicit occupancy reconstruction from noisy point clouds.",
    )
    parser.add_argument(
        "--threads", type=int, default=None, help="cap worker/BLAS thread count"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="optimize a model on procedural shapes")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=("desk", "paper_scale"), help="named base config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="extract a mesh from a point cloud")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint (.mxrc)")
    p.add_argument("--config", help="YAML run configuration (default: beside checkpoint)")
    p.add_argument("--input", required=True, help="input point cloud (.xyz/.ply/.obj)")
    p.add_argument("--res", type=int, default=None, help="grid resolution override")
    p.add_argument("--out", required=True, help="output mesh path (.obj/.ply)")
    p.add_argument(
        "--emit-denoised",
        action="store_true",
        help="also write the denoised cloud next to the mesh",
    )
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="compare predicted meshes against ground truth")
    p.add_argument("--pred", required=True, help="mesh file or directory of meshes")
    p.add_argument("--gt", required=True, help="ground-truth mesh or run config (.yaml)")
    p.add_argument("--samples", type=int, default=None, help="surface samples per mesh")
    p.add_argument("--tau", type=float, default=None, help="f-score distance threshold")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--strict", action="store_true", help="fail on degenerate predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("info", help="report parameter counts and shapes")
    p.add_argument("--checkpoint", help="checkpoint to inspect")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--preset", choices=("desk", "paper_scale"), help="named base config")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        threads = _resolve_threads(args.threads)
        if threads is not None:
            _cap_threads(threads)
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 0
    except Exception as e:  # map module errors onto the exit-code contract
        from . import losses_train as lt

        if isinstance(e, (lt.NumericsError, FloatingPointError)):
            print(f"numerical failure: {e}", file=sys.stderr)
            return 3
        from . import config as cf
        from . import fileio

        if isinstance(
            e, (cf.ConfigError, fileio.FileFormatError, lt.TrainingError, OSError, ValueError)
        ):
            print(f"error: {e}", file=sys.stderr)
            return 2
        raise


if __name__ == "__main__":
    sys.exit(main())
