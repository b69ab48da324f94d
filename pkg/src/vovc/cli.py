"""Command-line front end: ``vovc <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command writes
its outputs atomically and leaves a JSON manifest beside them. ``VOVC_THREADS``
caps the number of parallel jobs (one job per input signal); BLAS is pinned to
one thread so results never depend on it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, config
from .codec import CodecConfig, StageError, decode, decode_vector, encode, parse, serialize
from .dynamics import TimeGrid
from .evaluation import bound_check, dp_sweep, is_kernel_check, marginal_check, psnr, rows_to_csv
from .net import NetConfig, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train_base
from .prng import PrngStream, derive_seed, normals
from .scaling import initial_state
from .signals import FormatError, gen_corpus, read_pgm, read_vsig, write_pgm, write_vsig

log = logging.getLogger("vovc")

LAMBDA_GRID = (1.5e-3, 3e-3, 6e-3)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class TrainFile:
    """Keys accepted by ``train-base --config``."""

    steps: int = 3000
    batch: int = 64
    lr: float = 1.5e-3
    weight_decay: float = 1e-4
    cosine: bool = True
    hidden_dims: tuple[int, ...] = (256, 256, 256)
    time_embed_dim: int = 16
    activation: str = "silu"


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(target: Path, command: str, digest: str, seeds: dict, outputs: list[Path], started: float):
    """``<target>.manifest.json``; everything except ``wall_clock_s`` is reproducible."""
    manifest = {
        "command": command,
        "config_digest": digest,
        "seeds": seeds,
        "tool_version": __version__,
        "outputs": {str(p): hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in outputs},
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = Path(str(target) + ".manifest.json")
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return path


def _digest_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def read_signal(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read signal {path}: {e.strerror}") from e
    return read_pgm(raw) if path.suffix.lower() == ".pgm" else read_vsig(raw)


def write_signal(path: Path, x: np.ndarray) -> None:
    side = math.isqrt(x.size)
    img = x.reshape(side, side) if side * side == x.size else x
    atomic_write(path, write_pgm(img) if Path(path).suffix.lower() == ".pgm" else write_vsig(img))


def read_config(path: str | None, seed: int | None = None) -> CodecConfig:
    text = Path(path).read_text(encoding="utf-8") if path else ""
    over = {} if seed is None else {"sampler_seed": seed}
    return CodecConfig.from_text(text, **over)


def load_net(path: str):
    try:
        return load_checkpoint(Path(path).read_bytes())
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e.strerror}") from e


def n_workers(jobs: int) -> int:
    raw = os.environ.get("VOVC_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError:
        raise UsageError(f"VOVC_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, jobs))


def run_jobs(fn, args: list) -> list:
    """Ordered results of ``fn`` over ``args``, possibly in worker processes."""
    w = n_workers(len(args))
    if w == 1:
        return [fn(a) for a in args]
    with ProcessPoolExecutor(max_workers=w, initializer=_pin_blas) as ex:
        return list(ex.map(fn, args))


def _pin_blas():
    threadpool_limits(1)


# -- commands ---------------------------------------------------------------

def cmd_gen_corpus(a) -> int:
    started = time.time()
    if a.count < 1:
        raise UsageError("--count must be >= 1")
    if a.dim < 2:
        raise UsageError("--dim must be >= 2")
    out = Path(a.out)
    paths = []
    for i, img in enumerate(gen_corpus(a.count, a.dim, a.seed)):
        p = out / f"sig_{i:05d}.vsig"
        atomic_write(p, write_vsig(img))
        paths.append(p)
    write_manifest(out / "corpus", "gen-corpus", _digest_text(f"{a.count},{a.dim}"), {"seed": a.seed}, paths, started)
    print(f"wrote {len(paths)} signals to {out}")
    return 0


def cmd_train_base(a) -> int:
    started = time.time()
    text = Path(a.config).read_text(encoding="utf-8") if a.config else ""
    tf = config.load(TrainFile, text)
    corpus_dir = Path(a.corpus)
    files = sorted(corpus_dir.glob("*.vsig")) + sorted(corpus_dir.glob("*.pgm"))
    if not corpus_dir.is_dir() or not files:
        raise FileNotFoundError(f"no corpus signals found in {corpus_dir}")
    corpus = [read_signal(p).ravel() for p in files]
    net_cfg = NetConfig.for_corpus(corpus, hidden_dims=tf.hidden_dims, time_embed_dim=tf.time_embed_dim,
                                   activation=tf.activation, seed=a.seed)
    cfg = TrainConfig(steps=tf.steps, batch=tf.batch, lr=tf.lr, weight_decay=tf.weight_decay, seed=a.seed,
                      cosine=tf.cosine)
    losses: list[float] = []
    net = train_base(corpus, cfg, net_cfg, loss_log=losses)
    out = Path(a.out)
    atomic_write(out, save_checkpoint(net))
    loss_csv = Path(str(out) + ".loss.csv")
    atomic_write(loss_csv, ("step,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses))).encode())
    write_manifest(out, "train-base", _digest_text(config.dump(tf)), {"seed": a.seed}, [out, loss_csv], started)
    tail = np.mean(losses[-50:]) if losses else float("nan")
    print(f"trained {tf.steps} steps on {len(corpus)} signals; final 50-step mean loss {tail:.4f}")
    return 0


def _encode_job(job):
    ckpt, sig_path, cfg_text, scale, out = job
    with threadpool_limits(1):
        net = load_net(ckpt)
        cfg = CodecConfig.from_text(cfg_text)
        x = read_signal(sig_path).ravel()
        res = encode(net, x, cfg, scale)
        data = serialize(res.bitstream)
        atomic_write(Path(out), data)
        return str(out), res.bits, psnr(x, res.x_hat), cfg.digest().hex()


def cmd_encode(a) -> int:
    started = time.time()
    cfg = read_config(a.config, a.seed)
    scale = tuple(a.scale) if a.scale else None
    if scale and (scale[0] < 1 or scale[1] < 1 or scale[2] < 0):
        raise UsageError("--scale needs N >= 1, M >= 1, seed >= 0")
    sigs = [Path(s) for s in a.signals]
    if len(sigs) == 1:
        outs, cfgs = [Path(a.out)], [cfg]
    else:
        outs = [Path(a.out) / (s.stem + ".vovb") for s in sigs]
        # one job per signal, each with its own sampler seed derived from the root
        cfgs = [replace(cfg, sampler_seed=derive_seed(cfg.sampler_seed, i)) for i in range(len(sigs))]
    jobs = [(a.ckpt, str(s), c.to_text(), scale, str(o)) for s, c, o in zip(sigs, cfgs, outs)]
    for out, bits, p, digest in run_jobs(_encode_job, jobs):
        idx = f" index={bits.index_bits}" if bits.scaling_bits else ""
        print(f"{out}: header={bits.header_bits} payload={bits.payload_bits} scaling={bits.scaling_bits}{idx} "
              f"total={bits.total_bits} bits  bpd={bits.bpd:.4f}  psnr={p:.4f} dB")
    seeds = {"sampler": [c.sampler_seed for c in cfgs], "projection": cfg.proj_seed}
    if scale:
        seeds["scale"] = scale[2]
    target = outs[0] if len(outs) == 1 else Path(a.out) / "encode"
    write_manifest(target, "encode", cfg.digest().hex(), seeds, outs, started)
    return 0


def cmd_decode(a) -> int:
    started = time.time()
    cfg = read_config(a.config)
    net = load_net(a.ckpt)
    b = parse(Path(a.bitstream).read_bytes())
    x_hat = decode(net, b, cfg, tau=a.tau)
    out = Path(a.out)
    write_signal(out, x_hat)
    if a.reference:
        print(f"psnr={psnr(read_signal(a.reference).ravel(), x_hat):.4f} dB")
    write_manifest(out, "decode", cfg.digest().hex(), {"sampler": b.sampler_seed}, [out], started)
    print(f"wrote {out}")
    return 0


def _adapted_field(net, cfg, bitstream):
    if bitstream is None:
        return net.field()
    _, delta = decode_vector(net, parse(Path(bitstream).read_bytes()), cfg)
    return net.field(delta)


def _rate_job(job):
    ckpt, sig_path, cfg_text, lam = job
    with threadpool_limits(1):
        net = load_net(ckpt)
        cfg = CodecConfig.from_text(cfg_text, lam=lam)
        x = read_signal(sig_path).ravel()
        res = encode(net, x, cfg)
        return lam, str(sig_path), res.bits.payload_bits, res.bits.total_bits, psnr(x, res.x_hat)


@dataclass(frozen=True)
class RateRow:
    lam: float
    signal: str
    payload_bits: int
    total_bits: int
    psnr: float


@dataclass(frozen=True)
class RateMeanRow:
    lam: float
    mean_payload_bits: float
    mean_total_bits: float
    mean_psnr: float


def cmd_eval(a) -> int:
    started = time.time()
    cfg = read_config(a.config, a.seed)
    out = Path(a.out)
    outputs = []
    seed = cfg.sampler_seed
    for mode in a.mode:
        if mode in ("sweep-tau", "bound") and not a.signal:
            raise UsageError(f"--mode {mode} needs --signal")
        if mode == "sweep-tau":
            net = load_net(a.ckpt)
            x = read_signal(a.signal[0]).ravel()
            res = dp_sweep(_adapted_field(net, cfg, a.bitstream), x, initial_state(seed, x.size), cfg.grid)
            text = rows_to_csv(res.rows)
        elif mode == "bound":
            net = load_net(a.ckpt)
            x = read_signal(a.signal[0]).ravel()
            vf = _adapted_field(net, cfg, a.bitstream)
            taus = 0.05 + 0.9 * PrngStream(seed, "bound-tau").uniform(0, 0, a.cases)
            noise = normals(seed, "bound-noise", np.arange(a.cases), 0, x.size)
            text = rows_to_csv(_bound_rows(vf, x, noise, taus, seed))
        elif mode == "is-check":
            rows = [is_kernel_check(M=M, outer_trials=a.trials, seed=seed) for M in (1, 4, 16, 64, 256, 1024)]
            text = rows_to_csv(_with_derived(rows, ("z", "var_ratio")))
        elif mode == "marginal":
            rows = marginal_check(np.array([2.0]), particles=a.particles, seed=seed)
            text = rows_to_csv(_with_derived(rows, ("z", "var_ratio")))
        elif mode == "rate-curve":
            if not a.signal:
                raise UsageError("--mode rate-curve needs --signal")
            jobs = [(a.ckpt, s, cfg.to_text(), lam) for lam in LAMBDA_GRID for s in a.signal]
            rows = [RateRow(*r) for r in run_jobs(_rate_job, jobs)]
            means = [RateMeanRow(lam, *(float(np.mean([getattr(r, f) for r in rows if r.lam == lam]))
                                        for f in ("payload_bits", "total_bits", "psnr")))
                     for lam in LAMBDA_GRID]
            p = out / "rate-curve-mean.csv"
            atomic_write(p, rows_to_csv(means).encode())
            outputs.append(p)
            text = rows_to_csv(rows)
        else:
            raise UsageError(f"unknown mode {mode!r}")
        p = out / f"{mode}.csv"
        atomic_write(p, text.encode())
        outputs.append(p)
        print(f"wrote {p}")
    write_manifest(out / "eval", "eval " + ",".join(a.mode), cfg.digest().hex(), {"sampler": seed}, outputs, started)
    return 0


def _bound_rows(vf, x, noise, taus, seed):
    rows = []
    for i, (x1, tau) in enumerate(zip(noise, taus)):
        r = bound_check(vf, x, x1, float(tau), seed=seed + i)
        rows.append(BoundRow(**asdict(r), certified=r.certified, holds=r.holds()))
    return rows


@dataclass(frozen=True)
class BoundRow:
    tau: float
    measured_delta: float
    bound_value: float
    L_hat: float
    e_integral: float
    e_tau: float
    L_realized: float
    certified: bool
    holds: bool


def _with_derived(rows, names):
    """Rows re-made as dataclasses that also carry the listed properties."""
    import dataclasses

    base = type(rows[0])
    cls = dataclasses.make_dataclass(base.__name__ + "Row",
                                     [(f.name, f.type) for f in dataclasses.fields(base)] + [(n, float) for n in names],
                                     frozen=True)
    return [cls(**asdict(r), **{n: float(getattr(r, n)) for n in names}) for r in rows]


# -- entry point ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vovc", description="One-vector adaptation codec (toy scale).")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="write seeded toy signals")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--dim", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_corpus)

    t = sub.add_parser("train-base", help="flow-matching pretraining")
    t.add_argument("--corpus", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train_base)

    e = sub.add_parser("encode", help="compress one or more signals")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config")
    e.add_argument("--seed", type=int, help="sampler seed (overrides the config)")
    e.add_argument("--scale", type=int, nargs=3, metavar=("N", "M", "SEED"))
    e.add_argument("--out", required=True)
    e.add_argument("signals", nargs="+")
    e.set_defaults(fn=cmd_encode)

    d = sub.add_parser("decode", help="reconstruct a signal")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--config")
    d.add_argument("--tau", type=float, help="switch to the one-step map at this grid time")
    d.add_argument("--reference", help="original signal, to print PSNR")
    d.add_argument("--out", required=True)
    d.add_argument("bitstream")
    d.set_defaults(fn=cmd_decode)

    for name in ("eval", "plot-data"):
        v = sub.add_parser(name, help="oracles and sweeps as CSV")
        v.add_argument("--ckpt")
        v.add_argument("--config")
        v.add_argument("--seed", type=int)
        v.add_argument("--signal", action="append")
        v.add_argument("--bitstream")
        v.add_argument("--mode", action="append", required=True,
                       choices=["sweep-tau", "bound", "is-check", "marginal", "rate-curve"])
        v.add_argument("--cases", type=int, default=20)
        v.add_argument("--trials", type=int, default=1000)
        v.add_argument("--particles", type=int, default=10_000)
        v.add_argument("--out", required=True)
        v.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if a.fn is cmd_eval and set(a.mode) & {"sweep-tau", "bound", "rate-curve"} and not a.ckpt:
        print("usage error: --ckpt is required for this mode", file=sys.stderr)
        return 1
    try:
        with threadpool_limits(1):
            return a.fn(a)
    except (UsageError, config.ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (OSError, FormatError, StageError, TrainingError, ValueError, ArithmeticError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
