"""Command-line entry point tying the modules into reproducible runs.

Five subcommands: pretrain (fit an unconditional teacher), train (the full
distillation loop), sample (dump draws from the oracle or a trained
checkpoint), pnp (posterior inference on an inverse problem spec), and
verify (the statistical suites). Every command writes a manifest.json into
its output directory before any long computation starts, so interrupted runs
still leave a record of what was attempted. Data outputs (CSV, report JSON)
depend only on the manifest inputs; rerunning a command reproduces them byte
for byte.

Config files are flat ``key = value`` assignments. The prior distribution is
selected by the reserved keys prior_kind ("ring", "two-mode", "single",
"json"), prior_args (a dict literal of constructor arguments), and
prior_file (for "json"); all remaining keys must belong to the target
config, and unknown keys are hard errors.
"""

from __future__ import annotations

import argparse
import json
import math
import subprocess
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .batches import SampleBatch
from .configfile import read_config
from .diagnostics import (
    check_conditional_score,
    check_gradient_unbiasedness,
    check_multistep_marginals,
)
from .distill import (
    LearnedTeacher,
    TrainConfig,
    pretrain_teacher,
    save_train_checkpoint,
    train,
)
from .metrics import energy_distance
from .mixtures import GaussianMixture, ring_2d, single_gaussian, two_mode_1d
from .nets import DenoiserNet, load_checkpoint, save_checkpoint
from .sampling import (
    GeneratorDenoiser,
    OracleDenoiser,
    SamplerConfig,
    edm_schedule,
    multistep_denoise,
    unconditional_sample,
)
from .splitgibbs import PnPGDConfig, build_energy, run_pnp_gd
from .streams import rng_stream

__all__ = ["main"]

_PRIOR_KEYS = ("prior_kind", "prior_args", "prior_file")

_PNP_KEYS = frozenset(
    _PRIOR_KEYS
    + (
        "energy", "A", "y_obs", "H", "b",
        "beta", "sigma_y",
        "schedule_n", "schedule_sigma_min", "schedule_sigma_max", "schedule_rho",
        "ula_steps", "c1", "c2", "sigma_ema", "mu", "prior_steps", "likelihood",
        "chains",
    )
)


def _build_prior(cfg: dict) -> GaussianMixture:
    """Pop the prior_* keys out of cfg and construct the mixture."""
    kind = cfg.pop("prior_kind", "ring")
    args = cfg.pop("prior_args", {})
    file = cfg.pop("prior_file", None)
    if not isinstance(args, dict):
        raise ValueError("prior_args must be a dict literal")
    if kind == "ring":
        return ring_2d(**args)
    if kind == "two-mode":
        return two_mode_1d(**args)
    if kind == "single":
        return single_gaussian(**args)
    if kind == "json":
        if file is None:
            raise ValueError("prior_kind 'json' needs prior_file")
        return GaussianMixture.from_dict(json.loads(Path(file).read_text(encoding="utf-8")))
    raise ValueError(f"unknown prior_kind {kind!r} (ring, two-mode, single, json)")


def _source_revision() -> str:
    try:
        out = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def _write_manifest(out: Path, command: str, seed: int, config_path, extra: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "experiment": f"{command}-{seed}",
        "command": command,
        "config": None if config_path is None else str(config_path),
        "seed": seed,
        "out": str(out),
        "revision": _source_revision(),
        "started": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def _write_metrics_csv(path: Path, rows: list) -> None:
    import csv

    columns = ["step", "images_seen", "loss_gen", "loss_score", "loss_disc", "w_lambda_mean", "swd_1step"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in columns])


def _load_generator(path) -> tuple:
    """Rebuild (GeneratorDenoiser over EMA params, TrainConfig) from a checkpoint."""
    nets, meta, _ = load_checkpoint(path)
    config = TrainConfig.from_dict(meta["config"])
    net = DenoiserNet(dim=config.dim, hidden=config.hidden_gen, sigma_data=config.sigma_data, conditional=True)
    return GeneratorDenoiser(net, nets["ema"], config.gamma, label="learned-1step"), config


def _load_teacher(path) -> LearnedTeacher:
    nets, meta, _ = load_checkpoint(path)
    if "teacher" not in nets:
        raise ValueError(f"{path} holds no teacher parameters")
    desc = meta["net"]
    net = DenoiserNet(
        dim=desc["dim"], hidden=tuple(desc["hidden"]), n_freq=desc["n_freq"],
        sigma_data=desc["sigma_data"], conditional=False,
    )
    return LearnedTeacher(net, nets["teacher"])


# ----------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> int:
    cfg = read_config(args.config)
    prior = _build_prior(cfg)
    config = TrainConfig.from_dict(cfg)
    seed = config.seed if args.seed is None else args.seed
    out = Path(args.out)
    _write_manifest(out, "pretrain", seed, args.config, {"teacher": config.teacher})
    if config.teacher == "analytic":
        print("teacher = 'analytic': closed-form posterior means need no pretraining; nothing to do")
        return 0
    net, params, report = pretrain_teacher(config, prior, seed=seed)
    save_checkpoint(
        out / "teacher.npz",
        {"teacher": params},
        meta={"net": net.describe(), "config": config.to_dict(), "report": report},
    )
    (out / "report.json").write_text(json.dumps({"seed": seed, **report}, indent=2) + "\n", encoding="utf-8")
    status = "ok" if report["passed"] else "above threshold"
    print(f"teacher held-out rmse {report['holdout_rmse']:.4f} ({status}); checkpoint at {out / 'teacher.npz'}")
    return 0


def cmd_train(args) -> int:
    cfg = read_config(args.config)
    prior = _build_prior(cfg)
    config = TrainConfig.from_dict(cfg)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out = Path(args.out)
    _write_manifest(out, "train", config.seed, args.config, {"total_images": config.total_images})

    teacher = None if args.checkpoint is None else _load_teacher(args.checkpoint)
    every = args.checkpoint_every
    boundaries = sorted({config.total_images} | (
        set(range(every, config.total_images, every)) if every else set()
    ))
    state, metrics = None, []
    for target in boundaries:
        stage = replace(config, total_images=target)
        state, rows = train(stage, prior, teacher=teacher, state=state, crash_path=out / "checkpoint-crash.npz")
        metrics.extend(rows)
        if target < config.total_images:
            save_train_checkpoint(out / f"checkpoint-{target:09d}.npz", state, config)
    save_train_checkpoint(out / "checkpoint-final.npz", state, config, extra={"final": True})
    _write_metrics_csv(out / "metrics.csv", metrics)
    last = metrics[-1] if metrics else {}
    print(f"trained {state.images_seen} images over {state.step} steps; "
          f"final 1-step swd {last.get('swd_1step', float('nan')):.4f}; "
          f"EMA checkpoint at {out / 'checkpoint-final.npz'}")
    return 0


def cmd_sample(args) -> int:
    if (args.checkpoint is None) == (not args.oracle):
        raise SystemExit("sample needs exactly one of --checkpoint or --oracle")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    _write_manifest(out, "sample", seed, args.config, {
        "mode": args.mode, "steps": args.steps, "n": args.n,
        "checkpoint": args.checkpoint, "oracle": args.oracle,
    })

    cfg = {} if args.config is None else read_config(args.config)
    if args.oracle:
        prior = _build_prior(cfg)
        denoiser = OracleDenoiser(prior)
        sigma_min, sigma_max, rho = 0.002, 80.0, 7.0
    else:
        denoiser, tconf = _load_generator(args.checkpoint)
        sigma_min, sigma_max, rho = tconf.sigma_min, tconf.sigma_max, tconf.rho
    if cfg and not args.oracle:
        raise SystemExit("--config is only used with --oracle (the checkpoint fixes everything else)")

    rng = rng_stream(seed, "sample", args.mode, args.steps)
    if args.mode == "uncond":
        schedule = edm_schedule(args.steps, sigma_min, sigma_max, rho)
        batch = unconditional_sample(denoiser, schedule, SamplerConfig(), args.n, rng, seed=seed)
    else:
        if args.sigma is None or args.y is None:
            raise SystemExit("mode 'denoise' needs --sigma and --y")
        y = np.asarray(json.loads(args.y), dtype=float)
        if y.ndim != 1 or y.size != denoiser.dim:
            raise SystemExit(f"--y must be a length-{denoiser.dim} vector")
        schedule = edm_schedule(args.steps, min(sigma_min, args.sigma / 4), args.sigma, rho)
        rows = np.repeat(y[None, :], args.n, axis=0)
        data = multistep_denoise(denoiser, rows, args.sigma, schedule, SamplerConfig(init="exact"), rng)
        batch = SampleBatch(data=data, seed=seed, source=denoiser.label, sigma=args.sigma, steps=schedule.n)
    batch.save_csv(out / "samples.csv")
    print(f"wrote {batch.n} samples ({batch.source}, {args.mode}, {args.steps} steps) to {out / 'samples.csv'}")
    return 0


def cmd_pnp(args) -> int:
    spec = read_config(args.config)
    unknown = set(spec) - _PNP_KEYS
    if unknown:
        raise SystemExit(f"unknown problem-spec keys: {sorted(unknown)}")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    _write_manifest(out, "pnp", seed, args.config, {"checkpoint": args.checkpoint})

    prior = _build_prior(spec)
    kind = spec.get("energy", "none")
    energy_spec = {}
    if "A" in spec:
        energy_spec["A"] = spec["A"]
    if "H" in spec:
        energy_spec["H"] = spec["H"]
    if "b" in spec:
        energy_spec["b"] = spec["b"]
    if "y_obs" in spec:
        energy_spec["y"] = spec["y_obs"]
    energy = build_energy(kind, energy_spec)

    if "beta" in spec and "sigma_y" in spec:
        raise SystemExit("give either beta or sigma_y, not both")
    if "sigma_y" in spec:
        beta = 2.0 * float(spec["sigma_y"]) ** 2
    elif "beta" in spec:
        beta = float(spec["beta"])
    elif kind == "none":
        beta = 1.0  # unused by a zero energy
    else:
        raise SystemExit("an energy needs beta (or sigma_y for the Gaussian case)")

    schedule = edm_schedule(
        spec.get("schedule_n", 50),
        spec.get("schedule_sigma_min", 0.002),
        spec.get("schedule_sigma_max", 10.0),
        spec.get("schedule_rho", 2.0),
    )
    config = PnPGDConfig(
        beta=beta,
        schedule=schedule,
        ula_steps=spec.get("ula_steps", 100),
        c1=spec.get("c1", 0.1),
        c2=spec.get("c2", 0.1),
        sigma_ema=spec.get("sigma_ema", math.inf),
        mu=spec.get("mu", 0.5),
        prior_steps=spec.get("prior_steps", 1),
        likelihood=spec.get("likelihood", "auto"),
    )
    if args.checkpoint is None:
        denoiser = OracleDenoiser(prior)
    else:
        denoiser, _ = _load_generator(args.checkpoint)
    chains = int(spec.get("chains", 256))

    samples, trajectory = run_pnp_gd(denoiser, energy, config, rng_stream(seed, "pnp"), chains=chains, record=True)
    SampleBatch(data=samples, seed=seed, source="pnp-gd", sigma=None, steps=schedule.n).save_csv(out / "solution.csv")
    trajectory.save_csv(out / "trajectory.csv")

    report = {"seed": seed, "energy": kind, "chains": chains, "levels": schedule.n}
    rng = rng_stream(seed, "pnp", "reference")
    if kind == "none":
        reference = prior.sample(chains, rng)
        report["posterior"] = "prior (no energy)"
    elif kind == "linear-gaussian":
        sigma_y = math.sqrt(beta / 2.0)
        posterior = prior.linear_posterior(np.asarray(spec["A"], dtype=float), np.asarray(spec["y_obs"], dtype=float), sigma_y)
        reference = posterior.sample(chains, rng)
        report["posterior"] = "closed-form linear-Gaussian"
    else:
        reference = None
        report["posterior"] = "no closed form for this energy"
    if reference is not None:
        distance = energy_distance(samples, reference)
        report["energy_distance"] = distance.to_dict()
        print(distance)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {chains} posterior draws to {out / 'solution.csv'}")
    return 0


def cmd_verify(args) -> int:
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    _write_manifest(out, "verify", seed, None, {"suite": args.suite, "fast": args.fast})
    suites = {
        "score": lambda: check_conditional_score(trials=200 if args.fast else 1000, seed=seed),
        "marginals": lambda: check_multistep_marginals(n=2048 if args.fast else 8192, seed=seed,
                                                       energy_threshold=2e-2 if args.fast else 5e-3),
        "gradient": lambda: check_gradient_unbiasedness(trials=20_000 if args.fast else 200_000, seed=seed),
    }
    names = list(suites) if args.suite == "all" else [args.suite]
    reports = [suites[name]() for name in names]
    for report in reports:
        print(report)
    payload = {"seed": seed, "reports": [r.to_dict() for r in reports]}
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0 if all(r.passed for r in reports) else 1


# ----------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgs", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, default=None, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain", help="fit an unconditional teacher denoiser")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="run the distillation loop")
    common(p)
    p.add_argument("--checkpoint", default=None, help="teacher checkpoint (for teacher = 'learned')")
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="IMAGES",
                   help="also snapshot every this many images")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="dump draws from the oracle or a checkpoint")
    common(p, config_required=False)
    p.add_argument("--checkpoint", default=None, help="trained checkpoint to sample from")
    p.add_argument("--oracle", action="store_true", help="sample the exact mixture instead")
    p.add_argument("--steps", type=int, default=1, help="number of denoising levels")
    p.add_argument("--n", type=int, default=1024, help="number of samples")
    p.add_argument("--mode", choices=("uncond", "denoise"), default="uncond")
    p.add_argument("--sigma", type=float, default=None, help="observation level for mode denoise")
    p.add_argument("--y", default=None, help="observation vector as JSON, e.g. '[0.3, -0.2]'")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("pnp", help="posterior inference on an inverse-problem spec")
    common(p)
    p.add_argument("--checkpoint", default=None, help="use a trained denoiser instead of the oracle")
    p.set_defaults(func=cmd_pnp)

    p = sub.add_parser("verify", help="run the statistical verification suites")
    p.add_argument("--suite", choices=("score", "marginals", "gradient", "all"), default="all")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fast", action="store_true", help="smaller trial counts for smoke runs")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except FileNotFoundError as err:
        print(f"dgs {args.command}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
