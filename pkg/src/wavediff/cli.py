"""``wavediff`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _seed(cli_seed: int | None, default: int = 0) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("WAVEDIFF_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"WAVEDIFF_SEED is not an integer: {env!r}") from None
    return default


def _log(quiet: bool):
    return None if quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))


# -- subcommands ---------------------------------------------------------------

def cmd_train(args) -> int:
    from .io.config import RunConfig
    from .io.datasets import SyntheticDatasetSpec, generate, load_dataset
    from .training import fit
    cfg = RunConfig.from_file(args.config)
    if args.data:
        dataset = load_dataset(args.data)
    elif cfg["data.source"] == "synthetic":
        dataset = generate(SyntheticDatasetSpec(cfg["data.kind"], cfg["data.resolution"], cfg["data.channels"],
                                                cfg["data.count"], cfg["data.seed"], cfg["data.noise"]))
    else:
        dataset = load_dataset(cfg["data.source"])
    seed = cfg.seed(args.seed)
    result = fit(dataset, cfg, args.out, seed=seed, resume=args.resume, max_steps=args.max_steps,
                 log=_log(args.quiet))
    print(f"trained {result.state.step} steps in {result.seconds:.1f}s; "
          f"last checkpoint {result.checkpoints[-1]}")
    return 0


def cmd_sample(args) -> int:
    from .diffusion import SamplerConfig, sample
    from .io.images import save_images
    from .rng import RngStream
    from .training import load_state
    cfg, state = load_state(args.checkpoint)
    schedule = cfg.schedule()
    if args.steps is not None and args.steps != schedule.T:
        raise UsageError(f"--steps {args.steps} does not match the checkpoint's T={schedule.T}; "
                         "the generator is trained for a fixed step count")
    seed = _seed(args.seed, cfg.seed())
    G = state.G if args.raw_weights else state.ema_generator()
    rng = RngStream(seed, "sample")
    scfg = SamplerConfig(steps=schedule.T, latent_dim=G.spec.latent_dim, seed=seed)
    out = []
    for start in range(0, args.num, args.batch):
        b = min(args.batch, args.num - start)
        out.append(sample(G, schedule, scfg, rng, b, G.spec.input_shape()))
    images = np.concatenate(out)
    save_images(images, args.out, {"checkpoint": os.path.basename(args.checkpoint), "steps": schedule.T,
                                   "seed": seed, "weights": "raw" if args.raw_weights else "ema"})
    print(f"wrote {len(images)} samples to {args.out}")
    return 0


def cmd_bench(args) -> int:
    from .bench import CSV_HEADER, bench_sampling, csv_row, write_csv
    from .diffusion import make_schedule
    from .networks import PRESETS, Generator
    from .rng import RngStream
    if args.checkpoint:
        from .training import load_state
        cfg, state = load_state(args.checkpoint)
        G, schedule, name = state.ema_generator(), cfg.schedule(), os.path.basename(args.checkpoint)
    else:
        if args.preset not in PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(sorted(PRESETS))}")
        p = PRESETS[args.preset]
        G = Generator(p.spec, RngStream(_seed(args.seed), "init"))
        schedule, name = make_schedule(args.steps or p.steps), args.preset
    result = bench_sampling(G, schedule, args.batch, args.trials, args.warmup, _seed(args.seed))
    row = csv_row(name, G, result)
    if args.csv:
        write_csv(args.csv, [row])
    print(",".join(CSV_HEADER))
    print(",".join(str(v) for v in row))
    return 0


def cmd_costs(args) -> int:
    from .accounting import count_costs
    from .networks import PRESETS, discriminator_spec_for
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(sorted(PRESETS))}")
    spec = PRESETS[args.preset].spec
    rep = count_costs(discriminator_spec_for(spec) if args.discriminator else spec)
    print(rep.table() if args.table else
          f"params={rep.params} flops={rep.flops} activation_mem={rep.activation_mem}")
    return 0


def _read_image(path: str) -> np.ndarray:
    from .io.images import read_pnm, to_unit
    return to_unit(read_pnm(path))[None]


def cmd_dwt(args) -> int:
    from .io.tensorfile import save_wdt
    from .wavelet import multilevel_dwt
    y = multilevel_dwt(_read_image(args.input), args.levels).data
    save_wdt(args.out, y, {"levels": args.levels, "source": os.path.basename(args.input)})
    return 0


def cmd_idwt(args) -> int:
    from .io.images import quantize, write_pnm
    from .io.tensorfile import load_wdt
    from .wavelet import multilevel_idwt
    y, meta = load_wdt(args.input)
    x = multilevel_idwt(y, int(meta.get("levels", 1))).data
    if x.shape[0] != 1:
        raise UsageError(f"{args.input} holds {x.shape[0]} images; idwt writes one")
    write_pnm(args.out, quantize(x[0]))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    try:
        reports = run_all(_seed(args.seed), args.coords, args.case)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    ok = True
    for name, rep in reports.items():
        tol = args.tol if args.tol is not None else rep.tolerance
        passed = rep.worst < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: max rel err {rep.worst:.3e} (tol {tol:.0e})")
    return 0 if ok else 2


def cmd_gen_data(args) -> int:
    from .io.datasets import SyntheticDatasetSpec, write_dataset
    seed = _seed(args.seed)
    names = write_dataset(SyntheticDatasetSpec(args.kind, args.res, args.channels, args.count, seed, args.noise),
                          args.out)
    print(f"wrote {len(names)} images to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .io.datasets import KINDS
    p = _Parser(prog="wavediff", description="Wavelet-space few-step diffusion GAN at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default=".", help="directory for checkpoints and CSV logs")
    t.add_argument("--seed", type=int, help="overrides WAVEDIFF_SEED and train.seed")
    t.add_argument("--data", help="directory of PGM/PPM images (overrides data.source)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw images from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--num", type=int, default=16)
    s.add_argument("--steps", type=int, help="must equal the trained step count")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--raw-weights", action="store_true", help="use raw instead of EMA generator weights")
    s.set_defaults(func=cmd_sample)

    b = sub.add_parser("bench", help="time sampling and emit a CSV row")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--preset")
    b.add_argument("--steps", type=int, help="step count for --preset (default: preset's)")
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--trials", type=int, default=10)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--seed", type=int)
    b.add_argument("--csv", help="append the row to this file")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("costs", help="analytic params / FLOPs / activation memory of a preset")
    c.add_argument("--preset", required=True)
    c.add_argument("--discriminator", action="store_true")
    c.add_argument("--table", action="store_true", help="per-layer breakdown")
    c.set_defaults(func=cmd_costs)

    d = sub.add_parser("dwt", help="image (PGM/PPM) -> packed subband tensor file")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--levels", type=int, default=1)
    d.set_defaults(func=cmd_dwt)

    i = sub.add_parser("idwt", help="packed subband tensor file -> image")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_idwt)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and the tiny networks")
    g.add_argument("--case", help="check a single registered case")
    g.add_argument("--tol", type=float, help="override per-case tolerance")
    g.add_argument("--coords", type=int, default=3, help="coordinates per network parameter tensor")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    gd = sub.add_parser("gen-data", help="write a synthetic corpus")
    gd.add_argument("--kind", choices=KINDS, default="two-mode-gaussian-images")
    gd.add_argument("--res", type=int, default=32)
    gd.add_argument("--channels", type=int, choices=(1, 3), default=3)
    gd.add_argument("--count", type=int, default=1024)
    gd.add_argument("--noise", type=float, default=0.01)
    gd.add_argument("--seed", type=int)
    gd.add_argument("--out", required=True)
    gd.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    from .io.config import ConfigError
    parser = build_parser()
    args = None
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"wavediff {getattr(args, 'command', '')}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
