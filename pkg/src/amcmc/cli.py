"""Command-line entry point: the desk-scale experiments as reproducible
subcommands.

Every run echoes its configuration into the output directory before any
compute, then writes CSV artifacts, JSON checkpoints, and rendered
figures.  All delimited artifacts and checkpoints are byte-identical
across reruns with the same seed; wall-clock timings live in separate
files excluded from that guarantee.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import reports
from .autodiff import GradientError
from .data_io import (
    RunConfig,
    load_csv,
    make_linear_latent_data,
    make_two_arcs,
    read_float_csv,
    split,
    write_float_csv,
)
from .diagnostics import (
    KsdConfig,
    ksd,
    lemma1_monotonicity_check,
    predictive_metrics,
)
from .kernels import KernelConfig, KernelError, SampleBatch, run_chain
from .samplers import (
    DropoutMlp,
    ImplicitMlp,
    MeanFieldGaussian,
    NormalizedEnsemble,
    VariationalProgram,
)
from .targets import (
    BnnPosterior,
    ConfigError,
    DiagonalGaussian,
    GaussianMixture1D,
    make_reversible_chain,
)
from .trainer import (
    TrainConfig,
    aligned_relative_error,
    derived_rng,
    fit,
    GenerativeModel,
    vi_baseline_fit,
)
from .update_rules import UpdateRuleConfig

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

SWEEP_GRID = ((1, 0.1), (5, 0.02), (10, 0.01))


def _out_path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg["out_dir"], name)


def _echo_config(cfg: RunConfig):
    os.makedirs(cfg["out_dir"], exist_ok=True)
    with open(_out_path(cfg, "config.json"), "w") as fh:
        fh.write(cfg.to_json())


def _train_config(cfg: RunConfig, **overrides) -> TrainConfig:
    kernel = KernelConfig(
        steps=cfg["kernel_steps"],
        step_size=cfg["step_size"],
        metropolis_adjust=cfg["metropolis_adjust"],
        acceptance_target=cfg["acceptance_target"],
    )
    rule = UpdateRuleConfig(
        rule=cfg["rule"],
        beta=cfg["beta"],
        generator_loss_variant=cfg["generator_loss_variant"],
        independent_z0=cfg["independent_z0"],
    )
    base = dict(
        iterations=cfg["iterations"],
        K=cfg["particles"],
        kernel=kernel,
        rule=rule,
        lr_phi=cfg["lr_phi"],
        lr_psi=cfg["lr_psi"],
        lr_theta=cfg["lr_theta"],
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
        eval_samples=cfg["eval_samples"],
    )
    base.update(overrides)
    return TrainConfig(**base)


def _build_sampler(cfg: RunConfig, seed: int):
    rng = derived_rng(seed, 0, 100)
    family = cfg["sampler_family"]
    if family == "mean_field_gaussian":
        return MeanFieldGaussian(1)
    if family == "variational_program":
        return VariationalProgram()
    if family == "implicit_mlp":
        spec = ImplicitMlp(layer_sizes=(3, 20, 20, 1), rng=rng)
        _widen_output(spec)
        return spec
    if family == "dropout_mlp":
        spec = DropoutMlp(layer_sizes=(3, 20, 20, 1), rate=0.5, rng=rng)
        _widen_output(spec)
        return spec
    raise ConfigError(f"unknown sampler family {family!r} for the mixture task")


def _widen_output(spec, gain: float = 3.0):
    """Scale the output layer so initial samples straddle both modes; a
    narrow skewed start tends to hand one basin all the particles."""
    from . import autodiff as ad

    arrays = {n: spec.params.value(n).copy() for n in spec.params.names()}
    last = f"w{len(spec.layer_sizes) - 2}"
    arrays[last] = arrays[last] * gain
    spec.params = ad.ParamSet(arrays)


def _eval_target(cfg: RunConfig):
    name = cfg["eval_target"]
    if name == "gmm":
        return GaussianMixture1D()
    if name == "standard_normal":
        return DiagonalGaussian(0.0, 1.0)
    raise ConfigError(f"unknown eval_target {name!r}")


def cmd_gmm_fit(cfg: RunConfig) -> int:
    target = GaussianMixture1D()
    if cfg["rule"] == "inclusive_kl" and cfg["sampler_family"] != "mean_field_gaussian":
        raise ConfigError(
            f"inclusive_kl needs a tractable family, not {cfg['sampler_family']!r}"
        )
    spec = _build_sampler(cfg, cfg["seed"])
    config = _train_config(cfg)
    result = fit(config, target, spec=spec)

    result.ledger.write_csv(_out_path(cfg, "ledger.csv"))
    result.ledger.write_timings_csv(_out_path(cfg, "timings.csv"))
    with open(_out_path(cfg, "checkpoint_phi.json"), "w") as fh:
        fh.write(spec.checkpoint())
    if result.disc is not None:
        with open(_out_path(cfg, "checkpoint_psi.json"), "w") as fh:
            fh.write(result.disc.params.to_json())

    eval_rng = derived_rng(cfg["seed"], max(config.iterations, 1), 3)
    final = spec.sample(max(cfg["eval_samples"], 2), eval_rng)
    write_float_csv(
        _out_path(cfg, "samples.csv"),
        [f"z{i}" for i in range(final.dim)],
        [[float(v) for v in row] for row in final.particles],
    )
    final_ksd = ksd(final.particles, target, KsdConfig())
    write_float_csv(_out_path(cfg, "final_ksd.csv"), ["ksd"], [[final_ksd]])

    if cfg["render_figures"]:
        reports.render_density_fit(_out_path(cfg, "fit.png"), final.particles, target)
        rows = [(r.iteration, r.ksd) for r in result.ledger.records if np.isfinite(r.ksd)]
        if rows:
            reports.render_trace(
                _out_path(cfg, "ksd_trace.png"),
                [r[0] for r in rows],
                [r[1] for r in rows],
                "KSD",
                logy=True,
            )
    print(f"gmm-fit done: {config.iterations} iterations, final KSD {final_ksd:.5g}")
    return EXIT_OK


def cmd_gmm_sweep(cfg: RunConfig) -> int:
    target = GaussianMixture1D()
    repeats = cfg["sweep_repeats"]
    trace_rows, summary = [], []
    for T, eta in SWEEP_GRID:
        finals = []
        for rep in range(repeats):
            seed = cfg["seed"] + 1000 * rep + T
            run_cfg = cfg.replaced(kernel_steps=T, step_size=eta, seed=seed)
            spec = _build_sampler(run_cfg, seed)
            config = _train_config(run_cfg)
            result = fit(config, target, spec=spec)
            for record in result.ledger.records:
                if np.isfinite(record.ksd):
                    trace_rows.append([T, eta, rep, record.iteration, record.ksd])
            finals.append(result.ledger.final_ksd())
        summary.append(
            {
                "T": T,
                "eta": eta,
                "mean_final_ksd": float(np.mean(finals)),
                "std_final_ksd": float(np.std(finals)),
            }
        )
    write_float_csv(
        _out_path(cfg, "sweep.csv"),
        ["T", "eta", "repeat", "iteration", "ksd"],
        trace_rows,
    )
    write_float_csv(
        _out_path(cfg, "sweep_summary.csv"),
        ["T", "eta", "mean_final_ksd", "std_final_ksd"],
        [[r["T"], r["eta"], r["mean_final_ksd"], r["std_final_ksd"]] for r in summary],
    )
    if cfg["render_figures"]:
        reports.render_sweep(_out_path(cfg, "sweep.png"), summary)
    for r in summary:
        print(
            f"T={r['T']:>2} eta={r['eta']:<5g} mean final KSD "
            f"{r['mean_final_ksd']:.5g} +/- {r['std_final_ksd']:.5g}"
        )
    return EXIT_OK


def _bnn_posterior(train_ds, cfg):
    return BnnPosterior(
        train_ds.features, train_ds.labels, hidden=50, prior_std=cfg["prior_std"]
    )


def _bnn_amc(cfg, bnn, seed):
    spec = NormalizedEnsemble(bnn.dim)
    config = _train_config(
        cfg.replaced(seed=seed),
        K=10,
        kernel=KernelConfig(
            steps=1,
            step_size=cfg["step_size"],
            acceptance_target=0.99,
            adapt_rate=0.05,
            adapt_window=25,
        ),
        rule=UpdateRuleConfig(rule="energy_matching", beta=2.0),
        eval_every=0,
    )
    fit(config, bnn, spec=spec)
    draws = [
        spec.sample(10, derived_rng(seed, 5000 + i, 7)).particles for i in range(10)
    ]
    return np.vstack(draws), spec


def _bnn_mala(cfg, bnn, seed, particles):
    rng = derived_rng(seed, 0, 11)
    start = SampleBatch(0.1 * rng.standard_normal((particles, bnn.dim)))
    kernel = KernelConfig(
        steps=cfg["mala_steps"],
        step_size=cfg["step_size"],
        acceptance_target=0.99,
        adapt_rate=0.05,
        adapt_window=25,
    )
    out = run_chain(start, kernel, bnn, seed=seed)
    return out.particles


def _bnn_vi(cfg, bnn, seed):
    spec = MeanFieldGaussian(bnn.dim, log_std0=np.full(bnn.dim, -2.0))
    config = _train_config(cfg.replaced(seed=seed), eval_every=0)
    vi_baseline_fit(spec, bnn, config, n_samples=10)
    return spec.sample(100, derived_rng(seed, 9000, 13)).particles


def cmd_bnn_train(cfg: RunConfig) -> int:
    if cfg["dataset_csv"]:
        dataset = load_csv(cfg["dataset_csv"], cfg["label_column"])
    else:
        dataset = make_two_arcs(n=cfg["n_data"], seed=cfg["seed"])

    methods = (
        ("amc", _bnn_amc),
        ("vi_meanfield", _bnn_vi),
        ("mala_100", lambda c, b, s: _bnn_mala(c, b, s, cfg["mala_particles"])),
        ("mala_10", lambda c, b, s: _bnn_mala(c, b, s, 10)),
    )
    rows, fig_rows = [], []
    for split_idx in range(cfg["n_splits"]):
        train_ds, test_ds = split(dataset, cfg["test_fraction"], seed=cfg["seed"] + split_idx)
        bnn = _bnn_posterior(train_ds, cfg)
        for name, builder in methods:
            t0 = time.perf_counter()
            built = builder(cfg, bnn, cfg["seed"] + 17 * split_idx)
            weights = built[0] if isinstance(built, tuple) else built
            seconds = time.perf_counter() - t0
            metrics = predictive_metrics(weights, bnn, test_ds.features, test_ds.labels)
            rows.append([name, split_idx, metrics.log_likelihood, metrics.error_rate])
            fig_rows.append(
                {
                    "method": name,
                    "seconds": seconds,
                    "test_ll": metrics.log_likelihood,
                    "test_error": metrics.error_rate,
                }
            )
    write_float_csv(
        _out_path(cfg, "metrics.csv"),
        ["method", "split", "test_ll", "test_error"],
        rows,
    )
    write_float_csv(
        _out_path(cfg, "timings_methods.csv"),
        ["method", "split", "seconds"],
        [[r["method"], i % cfg["n_splits"], r["seconds"]] for i, r in enumerate(fig_rows)],
    )
    if cfg["render_figures"]:
        reports.render_bnn_tradeoff(_out_path(cfg, "tradeoff.png"), fig_rows)
    for name, _ in methods:
        lls = [r[2] for r in rows if r[0] == name]
        errs = [r[3] for r in rows if r[0] == name]
        print(
            f"{name:>12}: test LL {np.mean(lls):+.3f} +/- {np.std(lls):.3f}, "
            f"error {np.mean(errs):.3f} +/- {np.std(errs):.3f}"
        )
    return EXIT_OK


def cmd_mle_toy(cfg: RunConfig) -> int:
    X, W_true = make_linear_latent_data(
        n=cfg["n_data"], latent_dim=2, observed_dim=5,
        noise_std=cfg["obs_noise_std"], seed=cfg["seed"],
    )
    model = GenerativeModel(
        2, 5, decoder=cfg["decoder"], obs_noise_std=cfg["obs_noise_std"],
        rng=derived_rng(cfg["seed"], 0, 21),
    )
    config = _train_config(cfg, K=1)
    result = fit(config, model, data=X)
    result.ledger.write_csv(_out_path(cfg, "ledger.csv"), include_theta=True)
    result.ledger.write_timings_csv(_out_path(cfg, "timings.csv"))
    with open(_out_path(cfg, "checkpoint_theta.json"), "w") as fh:
        fh.write(model.params.to_json())
    with open(_out_path(cfg, "checkpoint_phi.json"), "w") as fh:
        fh.write(result.encoder.params.to_json())

    lines = [["final_theta_objective", result.ledger.records[-1].theta_objective]]
    if cfg["decoder"] == "linear":
        err = aligned_relative_error(model.weight_matrix(), W_true)
        lines.append(["aligned_relative_error", err])
        print(f"mle-toy done: aligned decoder error {err:.4f}")
    else:
        print("mle-toy done (mlp decoder; no weight-recovery metric)")
    write_float_csv(_out_path(cfg, "recovery.csv"), ["metric", "value"], lines)

    if cfg["render_figures"]:
        trace = [r.theta_objective for r in result.ledger.records]
        reports.render_trace(
            _out_path(cfg, "theta_objective.png"),
            np.arange(len(trace)), trace, "mean decoder log-likelihood",
        )
    return EXIT_OK


def cmd_ksd_eval(cfg: RunConfig) -> int:
    if not cfg["samples_csv"]:
        raise ConfigError("ksd-eval needs samples_csv in the config or --samples")
    _, samples = read_float_csv(cfg["samples_csv"])
    target = _eval_target(cfg)
    value = ksd(samples, target, KsdConfig())
    write_float_csv(_out_path(cfg, "ksd.csv"), ["ksd"], [[value]])
    print(f"KSD({os.path.basename(cfg['samples_csv'])} | {cfg['eval_target']}) = {value:.10g}")
    return EXIT_OK


def cmd_lemma1_check(cfg: RunConfig) -> int:
    rng = derived_rng(cfg["seed"], 0, 31)
    traces, violations = [], 0
    rows = []
    for chain_idx in range(cfg["chains"]):
        chain = make_reversible_chain(5, rng)
        q0 = rng.random(5)
        q0 /= q0.sum()
        values = lemma1_monotonicity_check(chain.M, chain.pi, q0, cfg["chain_steps"])
        traces.append(values)
        diffs = np.diff(values)
        violations += int(np.sum(diffs > 1e-12))
        rows.extend([[chain_idx, t, v] for t, v in enumerate(values)])
    write_float_csv(_out_path(cfg, "kl_trace.csv"), ["chain", "step", "kl"], rows)
    if cfg["render_figures"]:
        reports.render_kl_traces(_out_path(cfg, "kl_traces.png"), traces)
    print(
        f"lemma1-check: {cfg['chains']} chains x {cfg['chain_steps']} steps, "
        f"{violations} violations"
    )
    if violations:
        return EXIT_NUMERICAL
    return EXIT_OK


COMMANDS = {
    "gmm-fit": cmd_gmm_fit,
    "gmm-sweep": cmd_gmm_sweep,
    "bnn-train": cmd_bnn_train,
    "mle-toy": cmd_mle_toy,
    "ksd-eval": cmd_ksd_eval,
    "lemma1-check": cmd_lemma1_check,
}

# per-task defaults applied under the explicit config/flags
TASK_DEFAULTS = {
    "gmm-fit": {
        "kernel_steps": 50, "step_size": 0.5, "iterations": 5000,
        "lr_psi": 5e-4, "eval_every": 500, "eval_samples": 1000,
    },
    "gmm-sweep": {"iterations": 3000, "eval_every": 750, "eval_samples": 500},
    "bnn-train": {"iterations": 1500, "step_size": 0.05, "lr_phi": 5e-3},
    "mle-toy": {
        "iterations": 3000, "kernel_steps": 10, "step_size": 0.25,
        "acceptance_target": 0.7, "lr_phi": 1e-2, "lr_theta": 1e-2,
    },
    "lemma1-check": {},
    "ksd-eval": {},
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="amcmc",
        description="Amortised MCMC: teach a parametric sampler from its own "
        "MCMC-evolved samples.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--iterations", type=int, help="override iteration budget")
        p.add_argument("--no-figures", action="store_true", help="skip PNG rendering")
        if name == "ksd-eval":
            p.add_argument("--samples", help="samples CSV to score")
    return parser


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig({})
    overrides = dict(TASK_DEFAULTS.get(args.command, {}))
    if args.config:
        # explicit file wins over task defaults
        explicit = json.loads(open(args.config).read())
        for key in explicit:
            overrides.pop(key, None)
    cfg = cfg.replaced(task=args.command, **overrides)
    if args.seed is not None:
        cfg = cfg.replaced(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replaced(out_dir=args.out)
    if args.iterations is not None:
        cfg = cfg.replaced(iterations=args.iterations)
    if args.no_figures:
        cfg = cfg.replaced(render_figures=False)
    if getattr(args, "samples", None):
        cfg = cfg.replaced(samples_csv=args.samples)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        _echo_config(cfg)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (KernelError, GradientError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
