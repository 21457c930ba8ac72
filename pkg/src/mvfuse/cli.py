"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
Failures print a single ``mvfuse: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import geometry
from .config import ConfigError, RunConfig, load_config, profile_defaults
from .data import DataError, generate_synthetic_dataset, load_dataset, load_view_features
from .evaluation import DEFAULT_KS, DEFAULT_VIEWS, POOLING, embed_database, evaluate, fuse_views
from .io import FormatError, load_tensor, save_tensor
from .nn.tensor import NumericError, ShapeError
from .retrieval import IndexError_, load_index, query_topk, save_index
from .selftest import run_selftest
from .training import (
    Checkpoint,
    LossLog,
    RetrievalModel,
    TrainingError,
    model_from_checkpoint,
    train_stage1,
    train_stage2,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")

    parser = _Parser(prog="mvfuse", description="Multi-view image to 3D shape retrieval at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--textureless", action="store_true", help="emit meshes without colours")
    p.add_argument("--no-text", action="store_true", help="omit text features")

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint to write")
    p.add_argument("--init", type=Path, help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--log", type=Path, help="loss CSV to append to")

    p = sub.add_parser("embed-3d", parents=[common], help="shape embedding of one mesh or cloud")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help=".obj mesh or N x 9 .fbt cloud")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("embed-views", parents=[common], help="fuse a V x C view-feature file")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--pooling", choices=POOLING, default="learned")

    p = sub.add_parser("build-index", parents=[common], help="index every object of a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("query", parents=[common], help="Top-K search for an embedding or a view file")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True,
                   help="embedding (.fbt, d or 1 x d); with --ckpt, a V x C view-feature file")
    p.add_argument("--ckpt", type=Path, help="fuse --input with this checkpoint's aggregator")
    p.add_argument("--topk", type=int, default=5)

    p = sub.add_parser("eval", parents=[common], help="Recall@K table over a dataset")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--index", type=Path, help="prebuilt index (default: embed the dataset)")
    p.add_argument("--views", type=_int_list, default=list(DEFAULT_VIEWS))
    p.add_argument("--ks", type=_int_list, default=list(DEFAULT_KS))
    p.add_argument("--pooling", choices=POOLING, default="learned")
    p.add_argument("--table", action="store_true", help="print a Top-K column table instead of CSV")

    sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")

    p = sub.add_parser("serve", parents=[common], help="serve retrieval over HTTP")
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else profile_defaults("desk")
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_model(cfg: RunConfig, path: Path) -> RetrievalModel:
    return model_from_checkpoint(cfg, Checkpoint.load(path))


def _load_cloud(path: Path, cfg: RunConfig) -> np.ndarray:
    if path.suffix.lower() == ".obj":
        mesh = geometry.load_obj(path.read_bytes())
        return geometry.normalize_cloud(geometry.sample_surface(mesh, cfg.data.points, cfg.seed))
    pc = load_tensor(path)
    if pc.ndim != 2 or pc.shape[1] != 9:
        raise DataError(f"{path}: point cloud must be N x 9, got {pc.shape}")
    _require_finite(pc, path)
    return pc


def _require_finite(arr: np.ndarray, path: Path) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{path}: non-finite value in input")


def cmd_gen_data(args, cfg: RunConfig) -> int:
    d = cfg.data
    manifest = generate_synthetic_dataset(
        args.out, n_objects=d.n_objects, n_classes=d.n_classes, views_per_object=d.views,
        seed=cfg.seed, points=d.points, dim=d.dim, text=d.text and not args.no_text,
        textureless=d.textureless or args.textureless,
    )
    print(f"wrote {len(manifest.entries)} objects to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    dataset = load_dataset(args.data)
    log = LossLog(args.log)
    if args.stage == 1:
        ckpt = train_stage1(dataset, RetrievalModel(cfg), log)
    else:
        if args.init is None:
            raise UsageError("train --stage 2 needs --init STAGE1_CHECKPOINT")
        stage1 = Checkpoint.load(args.init)
        model = model_from_checkpoint(cfg, stage1)
        ckpt = train_stage2(dataset, model, stage1, log)
    ckpt.save(args.out)
    last = log.rows[-1][2] if log.rows else float("nan")
    print(f"stage {args.stage}: {len(log.rows)} steps, final loss {last:.6f}, wrote {args.out}")
    return EXIT_OK


def cmd_embed_3d(args, cfg: RunConfig) -> int:
    model = _load_model(cfg, args.ckpt)
    emb = model.encoder.encode_cloud(_load_cloud(args.input, cfg)).visual
    save_tensor(args.out, emb.astype(np.float32)[None, :])
    print(f"wrote 1 x {emb.shape[0]} embedding to {args.out}")
    return EXIT_OK


def cmd_embed_views(args, cfg: RunConfig) -> int:
    model = _load_model(cfg, args.ckpt)
    views = load_view_features(args.input)
    if args.pooling == "learned":
        out = model.aggregator.aggregate(views)
        fused = out.f_mvimg
        print("beta " + " ".join(f"{b:.6f}" for b in out.beta))
    else:
        fused = fuse_views(model, views, "mean")
    save_tensor(args.out, np.asarray(fused, dtype=np.float32)[None, :])
    print(f"wrote 1 x {len(fused)} fused embedding to {args.out}")
    return EXIT_OK


def cmd_build_index(args, cfg: RunConfig) -> int:
    model = _load_model(cfg, args.ckpt)
    index = embed_database(model, load_dataset(args.data))
    save_index(index, args.out)
    print(f"indexed {len(index)} objects (d={index.dim}) into {args.out}")
    return EXIT_OK


def cmd_query(args, cfg: RunConfig) -> int:
    index = load_index(args.index)
    if args.ckpt is not None:
        q = fuse_views(_load_model(cfg, args.ckpt), load_view_features(args.input))
    else:
        q = load_tensor(args.input).reshape(-1)
        _require_finite(q, args.input)
    print("rank,id,score")
    for rank, (oid, score) in enumerate(query_topk(index, q, args.topk).hits, 1):
        print(f"{rank},{oid},{score:.6f}")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = _load_model(cfg, args.ckpt)
    dataset = load_dataset(args.data)
    index = load_index(args.index) if args.index else embed_database(model, dataset)
    table = evaluate(model, dataset, index, args.views, args.ks, args.pooling)
    if args.table:
        ks = sorted(set(args.ks))
        print("views  " + "  ".join(f"Top-{k:<3d}" for k in ks))
        for v in table.views():
            print(f"{v:<5d}  " + "  ".join(f"{100 * table[(v, k)]:6.2f}" for k in ks))
    else:
        sys.stdout.write(table.csv())
    return EXIT_OK


def cmd_selftest(args, cfg: RunConfig) -> int:
    return EXIT_OK if run_selftest() else EXIT_NUMERIC


def cmd_serve(args, cfg: RunConfig) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(args.index, args.ckpt, cfg), host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "train": cmd_train, "embed-3d": cmd_embed_3d,
    "embed-views": cmd_embed_views, "build-index": cmd_build_index, "query": cmd_query,
    "eval": cmd_eval, "selftest": cmd_selftest, "serve": cmd_serve,
}


def _fail(code: int, message: str) -> int:
    print(f"mvfuse: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, f"usage error: {exc}")
    except ConfigError as exc:
        return _fail(EXIT_USAGE, f"config error: {exc}")
    except (NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, f"numeric error: {exc}")
    except (DataError, FormatError, geometry.MeshError, IndexError_, TrainingError, ShapeError) as exc:
        return _fail(EXIT_DATA, f"data error: {exc}")
    except (OSError, ValueError) as exc:
        return _fail(EXIT_DATA, f"data error: {exc}")


def cli_dispatch(argv) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
