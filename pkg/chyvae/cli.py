"""
Command-line surface: ``chyvae generate-data | train | eval-metric | traverse | sample | check``.

Exit codes: 0 on success, 1 on a failed check or a runtime error, 2 on a
usage or configuration error, 3 when training hits a non-finite gradient.
"""
import argparse
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional, Sequence

from .checks import LEVELS, REGISTRY, format_table, run_checks
from .data import CorrConfig, EllipseGenerator, FactorSpec, generate_dataset, render_ellipse, write_dataset
from .distributions import HyperpriorParams, RngStream
from .errors import ChyvaeError, ConfigurationError, IoError
from .linalg import SpdMatrix
from .metric import (
    MetricConfig,
    evaluate_metric,
    factor_value_encoder,
    model_encoder,
    noise_encoder,
    permuted_encoder,
    write_score_csv,
)
from .nn import Checkpoint, load_checkpoint
from .trainer import MODELS, SAMPLE_MODES, TrainConfig, image_shape, resume, sample_images, train, traverse
from .utils import exit_status, git_blob_hash, load_config_file, parse_grid, write_pgm

logger = logging.getLogger(__name__)

ORACLES = ("exact", "permuted", "noise")


# =============================================================================
# Run manifest
# =============================================================================

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Plain ``key value`` record of one command run."""

    command: str
    seed: int
    config: dict[str, Any]
    started: str = field(default_factory=_now)
    finished: Optional[str] = None
    dataset_hash: Optional[str] = None
    outputs: list[Path] = field(default_factory=list)

    def lines(self) -> list[str]:
        out = [f"command {self.command}", f"seed {self.seed}", f"started {self.started}"]
        out.append(f"finished {self.finished or _now()}")
        if self.dataset_hash:
            out.append(f"dataset_sha1 {self.dataset_hash}")
        out += [f"config.{key} {value}" for key, value in sorted(self.config.items())]
        out += [f"output {path}" for path in self.outputs]
        return out

    def write(self, path: Path) -> Path:
        self.finished = self.finished or _now()
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(self.lines()) + "\n")
        except OSError as e:
            raise IoError(f"cannot write manifest {path}: {e}") from e
        return path


# =============================================================================
# Commands
# =============================================================================

def _require(parser: argparse.ArgumentParser, args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            parser.error(f"--{name.replace('_', '-')} is required")


def cmd_generate_data(args: argparse.Namespace) -> int:
    manifest = RunManifest("generate-data", args.seed, _echo(args))
    dataset = generate_dataset(
        args.n, CorrConfig(args.rho_pos, args.rho_so), FactorSpec.default(), args.height, args.width, args.seed
    )
    out = write_dataset(dataset, args.out)
    manifest.dataset_hash = git_blob_hash(out)
    manifest.outputs.append(out)
    manifest.write(Path(f"{out}.manifest.txt"))
    print(f"wrote {len(dataset)} images to {out} (sha1 {manifest.dataset_hash})")
    return 0


def _train_config(args: argparse.Namespace) -> TrainConfig:
    try:
        hidden = tuple(int(h) for h in str(args.hidden).split(","))
    except ValueError as e:
        raise ConfigurationError(f"--hidden must be a comma list of widths, got {args.hidden!r}") from e
    return TrainConfig(
        model=args.model,
        nu=args.nu,
        beta=args.beta,
        latent_dim=args.latent_dim,
        hidden=hidden,
        batch_size=args.batch_size,
        steps=args.steps,
        eval_interval=args.eval_interval,
        metric_interval=args.metric_interval,
        seed=args.seed,
        data_path=args.data,
        dataset_size=args.dataset_size,
        rho_pos=args.rho_pos,
        rho_so=args.rho_so,
        lr=args.lr,
        out_dir=args.out_dir,
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = _train_config(args)
    manifest = RunManifest("train", args.seed, _echo(args))
    if args.data:
        manifest.dataset_hash = git_blob_hash(args.data)
    progress = not args.quiet
    result = resume(args.resume, config, progress=progress) if args.resume else train(config, progress=progress)
    out_dir = Path(args.out_dir)
    manifest.outputs += [out_dir / "train_log.csv", *result.checkpoints]
    if config.metric_interval:
        manifest.outputs.append(out_dir / "metrics.csv")
    manifest.write(out_dir / "manifest.txt")
    if result.log:
        last = result.log[-1]
        print(f"step {last['step']} recon/pixel {last['recon_per_pixel']:.5f} total {last['total']:.4f}")
    return 0


def _load(path: Optional[str]) -> Checkpoint:
    if path is None or not Path(path).is_file():
        raise ConfigurationError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _checkpoint_shape(checkpoint: Checkpoint) -> tuple[int, int]:
    height, width = checkpoint.meta.get("image", (None, None))
    return image_shape(checkpoint.params.config, height, width)


def _generator(args: argparse.Namespace, height: int = 32, width: int = 32) -> EllipseGenerator:
    return EllipseGenerator(CorrConfig(args.rho_pos, args.rho_so), FactorSpec.default(), height, width)


def cmd_eval_metric(args: argparse.Namespace) -> int:
    cfg = MetricConfig(L=args.L, M=args.M, B=args.B, N=args.N)
    if args.oracle:
        encoder = {
            "exact": factor_value_encoder,
            "permuted": permuted_encoder([1, 2, 3, 0]),
            "noise": noise_encoder(4, args.seed),
        }[args.oracle]
        generator = _generator(args)
    else:
        checkpoint = _load(args.ckpt)
        encoder = model_encoder(checkpoint.params)
        generator = _generator(args, *_checkpoint_shape(checkpoint))
    result = evaluate_metric(encoder, cfg, RngStream(args.seed), generator)
    print(f"score {result.score!r}")
    if args.out:
        manifest = RunManifest("eval-metric", args.seed, _echo(args))
        out = write_score_csv(result, args.out)
        votes = result.votes.to_csv(out.with_name(f"{out.stem}_votes.csv"))
        manifest.outputs += [out, votes]
        manifest.write(Path(f"{out}.manifest.txt"))
    return 0


def cmd_traverse(args: argparse.Namespace) -> int:
    checkpoint = _load(args.ckpt)
    height, width = _checkpoint_shape(checkpoint)
    generator = _generator(args, height, width)
    base = render_ellipse(generator.sample_batch(1, RngStream(args.seed)).indices[0], generator.spec, height, width)
    strip = traverse(checkpoint.params, base / 255.0, args.dim, parse_grid(args.grid))
    out = write_pgm(args.out or f"traverse_dim{args.dim}.pgm", strip)
    print(f"wrote {strip.shape[1] // width} tiles to {out}")
    return 0


def _hyperprior(checkpoint: Checkpoint, nu: Optional[float]) -> Optional[HyperpriorParams]:
    echo = checkpoint.meta.get("train", {})
    nu = nu if nu is not None else echo.get("nu")
    if nu is None:
        return None
    p = checkpoint.params.config.latent_dim
    sigma0 = echo.get("sigma0")
    return HyperpriorParams.from_sigma0(SpdMatrix(sigma0) if sigma0 else SpdMatrix.identity(p), nu)


def cmd_sample(args: argparse.Namespace) -> int:
    checkpoint = _load(args.ckpt)
    height, width = _checkpoint_shape(checkpoint)
    hp = _hyperprior(checkpoint, args.nu) if args.mode == "bartlett" else None
    images = sample_images(checkpoint.params, hp, args.n, args.mode, RngStream(args.seed), height, width)
    out_dir = Path(args.out_dir)
    for i, image in enumerate(images):
        write_pgm(out_dir / f"sample_{i:03d}.pgm", image)
    print(f"wrote {len(images)} samples to {out_dir}")
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    results = run_checks(args.level, tuple(args.only or ()), args.seed, args.tamper_kl_constant)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


# =============================================================================
# Parser
# =============================================================================

def _echo(args: argparse.Namespace) -> dict[str, Any]:
    skip = {"handler", "required", "config", "verbose", "quiet", "tamper_kl_constant"}
    return {k: v for k, v in vars(args).items() if k not in skip and v is not None}


def _add_corr(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--rho-pos", type=float, default=0.7, help="correlation of x and y position")
    parser.add_argument("--rho-so", type=float, default=0.7, help="correlation of scale and orientation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chyvae", description=__doc__.splitlines()[1])
    parser.add_argument("--config", help="flat 'key value' file; explicit flags win")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a CorrelatedEllipses dataset")
    gen.add_argument("--n", type=int, default=20_000)
    gen.add_argument("--height", type=int, default=32)
    gen.add_argument("--width", type=int, default=32)
    _add_corr(gen)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out")
    gen.set_defaults(handler=cmd_generate_data, required=("out",))

    tr = sub.add_parser("train", help="train a CHyVAE or beta-VAE")
    tr.add_argument("--model", choices=MODELS, default="chyvae")
    tr.add_argument("--nu", type=float)
    tr.add_argument("--beta", type=float)
    tr.add_argument("--data", help="CELD dataset; generated from the seed when omitted")
    tr.add_argument("--dataset-size", type=int, default=20_000)
    tr.add_argument("--steps", type=int, default=5000)
    tr.add_argument("--batch-size", type=int, default=50)
    tr.add_argument("--latent-dim", type=int, default=10)
    tr.add_argument("--hidden", default="512,256")
    tr.add_argument("--eval-interval", type=int, default=500)
    tr.add_argument("--metric-interval", type=int, default=0)
    tr.add_argument("--lr", type=float, default=1e-4)
    _add_corr(tr)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--resume", help="checkpoint to continue from")
    tr.add_argument("--out-dir")
    tr.set_defaults(handler=cmd_train, required=("out_dir",))

    ev = sub.add_parser("eval-metric", help="score a checkpoint with the majority-vote metric")
    ev.add_argument("--ckpt")
    ev.add_argument("--L", type=int, default=50)
    ev.add_argument("--M", type=int, default=1000)
    ev.add_argument("--B", type=int, default=200)
    ev.add_argument("--N", type=int, default=200)
    _add_corr(ev)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", help="score CSV; the vote matrix goes next to it")
    ev.add_argument("--oracle", choices=ORACLES, help=argparse.SUPPRESS)
    ev.set_defaults(handler=cmd_eval_metric, required=())

    tv = sub.add_parser("traverse", help="decode a sweep over one latent dimension")
    tv.add_argument("--ckpt")
    tv.add_argument("--dim", type=int, default=0)
    tv.add_argument("--grid", default="-2:2:7", help="start:stop:count or a comma list")
    _add_corr(tv)
    tv.add_argument("--seed", type=int, default=0)
    tv.add_argument("--out")
    tv.set_defaults(handler=cmd_traverse, required=())

    sm = sub.add_parser("sample", help="decode latent samples")
    sm.add_argument("--ckpt")
    sm.add_argument("--mode", choices=SAMPLE_MODES, default="bartlett")
    sm.add_argument("--n", type=int, default=16)
    sm.add_argument("--nu", type=float, help="override the checkpoint's degrees of freedom")
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--out-dir", default="samples")
    sm.set_defaults(handler=cmd_sample, required=())

    ck = sub.add_parser("check", help="run the numerical self-checks")
    ck.add_argument("--level", choices=LEVELS, default="quick")
    ck.add_argument("--only", action="append", choices=sorted(REGISTRY), help="run only this check (repeatable)")
    ck.add_argument("--seed", type=int, default=0)
    ck.add_argument("--tamper-kl-constant", action="store_true", help=argparse.SUPPRESS)
    ck.set_defaults(handler=cmd_check, required=())

    return parser


def _commands(parser: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    return next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices


def _apply_config_file(parser: argparse.ArgumentParser, argv: Sequence[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    entries = load_config_file(known.config)
    commands = _commands(parser)
    known_keys = {a.dest for p in commands.values() for a in p._actions}
    unknown = sorted(set(entries) - known_keys)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    for command in commands.values():
        dests = {a.dest for a in command._actions}
        command.set_defaults(**{k: v for k, v in entries.items() if k in dests})


def _configure_logging(args: argparse.Namespace) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    arguments = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, arguments)
    except ChyvaeError as e:
        return exit_status(e)
    args = parser.parse_args(arguments)
    _configure_logging(args)
    _require(_commands(parser)[args.command], args, *args.required)
    try:
        return args.handler(args)
    except ChyvaeError as e:
        return exit_status(e)


if __name__ == "__main__":
    sys.exit(main())
