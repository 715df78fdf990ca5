"""Command-line surface for building, exercising and benchmarking memories.

Subcommands: init, write, read, forget, sample, bench, inspect.  Every
command is headless and reproducible: all randomness flows from explicit
seed flags.  Exit codes: 0 success, 1 usage error, 2 data/format error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .bench import (
    CorruptionSpec,
    corrupt,
    load_cifar10,
    load_config,
    load_raw_tensor,
    mse,
    run_experiment,
    save_raw_tensor,
)
from .engine import (
    DivergenceError,
    OptimizerConfig,
    Query,
    ReadConfig,
    forget,
    read_auto,
    read_hetero,
    write,
)
from .network import ancestral_sample, build_memory
from .persistence import ModelFormatError, load_memory, read_header, save_memory


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def build_parser() -> _Parser:
    parser = _Parser(prog="bayespcn", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("init", help="create an empty memory from a config file")
    p.add_argument("--config", required=True, help="flat key=value config")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_init)

    p = sub.add_parser("write", help="store dataset items sequentially")
    p.add_argument("--memory", required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--format", choices=("raw", "cifar10"), default="raw")
    p.add_argument("--count", type=int, default=None, help="items to store (default: all)")
    p.add_argument("--steps", type=int, default=500, help="activation fit steps per write")
    p.add_argument("--forget-beta", type=float, default=0.0)
    p.add_argument("--forget-every", type=int, default=None)
    p.add_argument("--out", default=None, help="output model (default: overwrite --memory)")
    p.set_defaults(func=_cmd_write)

    p = sub.add_parser("read", help="recall query vectors, reporting per-item MSE")
    p.add_argument("--memory", required=True)
    p.add_argument("--queries", required=True, help="raw-tensor file of query vectors")
    p.add_argument("--corrupt", choices=("white_noise", "dropout", "mask"), default=None)
    p.add_argument("--corrupt-param", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0, help="corruption seed")
    p.add_argument("--image-shape", type=_ints, default=None, metavar="C,H,W")
    p.add_argument("--icm-iterations", type=int, default=30)
    p.add_argument("--steps-per-phase", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--out", default=None, help="raw-tensor file for the recalls")
    p.set_defaults(func=_cmd_read)

    p = sub.add_parser("forget", help="diffuse the memory toward its empty state")
    p.add_argument("--memory", required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_forget)

    p = sub.add_parser("sample", help="draw ancestral samples to a raw-tensor file")
    p.add_argument("--memory", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sample)

    p = sub.add_parser("bench", help="run a configured experiment, emitting CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("inspect", help="print a model file's header")
    p.add_argument("--memory", required=True)
    p.set_defaults(func=_cmd_inspect)

    return parser


def _cmd_init(args) -> int:
    cfg = load_config(args.config)
    mem = build_memory(
        cfg.dims,
        activation=cfg.activation,
        n_particles=cfg.n_particles,
        sigma_w2=cfg.sigma_w2,
        sigma_x2=cfg.sigma_x2,
        seed=args.seed,
    )
    save_memory(mem, args.out)
    print(f"initialized memory: dims={cfg.dims} particles={cfg.n_particles} -> {args.out}")
    return 0


def _load_dataset(path, fmt):
    return load_cifar10(path) if fmt == "cifar10" else load_raw_tensor(path)


def _cmd_write(args) -> int:
    mem = load_memory(args.memory)
    data = _load_dataset(args.data, args.format)
    items = data.vectors if args.count is None else data.vectors[: args.count]
    opt = OptimizerConfig(steps=args.steps)
    for i, x in enumerate(items):
        mem = write(mem, x, opt)
        if args.forget_every is not None and (i + 1) % args.forget_every == 0:
            mem = forget(mem, args.forget_beta)
    out = args.out or args.memory
    save_memory(mem, out)
    print(f"stored {len(items)} items (write_count={mem.write_count}) -> {out}")
    return 0


def _cmd_read(args) -> int:
    mem = load_memory(args.memory)
    data = load_raw_tensor(args.queries)
    read_cfg = ReadConfig(
        icm_iterations=args.icm_iterations,
        steps_per_phase=args.steps_per_phase,
        optimizer=OptimizerConfig(learning_rate=args.lr),
    )
    image_shape = args.image_shape or data.image_shape or (1, 1, data.vectors.shape[1])
    recalls = np.empty_like(data.vectors)
    errors = []
    for i, x in enumerate(data.vectors):
        if args.corrupt is None:
            query, known = x.copy(), None
        else:
            spec = CorruptionSpec(kind=args.corrupt, param=args.corrupt_param, seed=args.seed)
            query, known = corrupt(x, spec, image_shape, rng=np.random.default_rng([args.seed, i]))
        if known is None:
            recall = read_auto(mem, Query(values=query), read_cfg)
        else:
            recall = read_hetero(mem, Query(values=query, known_mask=known), read_cfg)
        recalls[i] = recall
        err = mse(x, recall)
        errors.append(err)
        print(f"item={i} mse={err:.8g}")
    print(f"mean_mse={float(np.mean(errors)):.8g}")
    if args.out:
        save_raw_tensor(args.out, np.clip(recalls, -1.0, 1.0))
    return 0


def _cmd_forget(args) -> int:
    mem = load_memory(args.memory)
    mem = forget(mem, args.beta)
    out = args.out or args.memory
    save_memory(mem, out)
    print(f"applied forget beta={args.beta} -> {out}")
    return 0


def _cmd_sample(args) -> int:
    mem = load_memory(args.memory)
    rng = np.random.default_rng(args.seed)
    draws = np.stack([ancestral_sample(mem, rng) for _ in range(args.count)])
    # the raw-tensor container requires [-1, 1]
    save_raw_tensor(args.out, np.clip(draws, -1.0, 1.0))
    print(f"wrote {args.count} samples -> {args.out}")
    return 0


def _cmd_bench(args) -> int:
    cfg = load_config(args.config)
    result = run_experiment(cfg)
    with open(args.out, "w") as f:
        result.write_csv(f)
    print(
        f"model={cfg.model} task={cfg.corruption.kind} T={cfg.sequence_length} "
        f"overall_mse={result.overall_mse:.8g} accuracy={result.accuracy:.4f} "
        f"elapsed_ms={result.elapsed_ms:.1f}"
    )
    return 0


def _cmd_inspect(args) -> int:
    header = read_header(args.memory)
    for key in ("dims", "activation", "n_particles", "write_count", "rng_seed", "sigma_x2", "sigma_w2"):
        print(f"{key}={header[key]}")
    return 0


def cli_dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ModelFormatError, DivergenceError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
