"""Reproducible experiment driver: simulate, train, evaluate, pce, decompose.

Configuration lives in an INI-style file (sections per module, key = value
lines); the CLI flags --seed and --out override the file.  A master seed
fans out to fixed per-stage seeds, so stages can be rerun independently
and byte-identical outputs follow from identical (config, seed) pairs.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import (
    MetricsReport,
    TrainConfig,
    build_model,
    error_decomposition,
    evaluate,
    load_model,
    save_model,
    train,
)
from .pce_ref import (
    AffineSdeCoeffs,
    analytic_table,
    gbm_retained_energy,
    gbm_second_moment,
    ou_retained_energy,
    ou_second_moment,
    propagator_solve,
)
from .sde_lab import (
    GaussianLangevin,
    GeometricBrownianMotion,
    OrnsteinUhlenbeck,
    SdeSpec,
    load_dataset,
    make_dataset,
    save_dataset,
)

__all__ = [
    "ExperimentConfig",
    "main",
    "cmd_simulate",
    "cmd_train",
    "cmd_evaluate",
    "cmd_pce",
    "cmd_decompose",
]

_STAGE_CODES = {"simulate": 0, "train": 1, "evaluate": 2, "pce": 3, "decompose": 4, "init": 5}


def stage_seed(master: int, stage: str) -> int:
    """Fixed splittable derivation of a per-stage seed from the master seed."""
    seq = np.random.SeedSequence([int(master), _STAGE_CODES[stage]])
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs, resolved and validated up front."""

    process: str
    spec: SdeSpec
    basis_size: int
    n_terms: int
    hidden: tuple[int, ...]
    train: TrainConfig
    sim_level: int
    eval_grid_size: int
    eval_samples: int
    realisations: int
    sinkhorn_epsilon: float | None
    sinkhorn_max_iters: int
    table_degree: int
    table_basis: int
    table_points: int
    ode_step: float
    energy_degree: int
    energy_basis: int
    decompose_samples: int
    reference_degree: int
    p_sweep: tuple[int, ...]
    out_dir: str
    seed: int
    threads: int = 1

    @property
    def t_grid(self) -> np.ndarray:
        horizon = self.spec.horizon
        return np.linspace(0.0, horizon, self.eval_grid_size)[1:]  # skip t = 0


_DEFAULTS = {
    "experiment": {"process": "ou", "seed": "1", "out_dir": "runs/out"},
    # the mean-reverting benchmark starts at its long-run mean
    "ou": {"theta": "1.0", "mean": "1.2", "sigma": "1.3", "x0": "1.2", "horizon": "1.0"},
    "gbm": {"mu": "1.0", "sigma": "0.3", "x0": "1.0", "horizon": "1.0"},
    "langevin": {
        "dim": "5",
        "mean": "alternating",
        "covariance_diag": "identity",
        "x0": "zeros",
        "horizon": "1.0",
    },
    "model": {"m": "32", "p": "64", "hidden": "256,256"},
    "train": {
        "learning_rate": "3e-4",
        "epochs": "30",
        "batch_size": "64",
        "n_samples": "20000",
        "sim_level": "12",
    },
    "eval": {
        "grid_size": "17",
        "n_eval": "2000",
        "realisations": "10",
        "sinkhorn_epsilon": "auto",
        "sinkhorn_max_iters": "500",
    },
    "pce": {
        "table_degree": "4",
        "table_basis": "8",
        "n_t": "257",
        "ode_step": "1e-3",
        "energy_degree": "6",
        "energy_basis": "64",
    },
    "decompose": {"n_eval": "2000", "reference_degree": "3", "p_sweep": "1,2,4,8,16,32,64"},
}


def _parse_vector(text: str, dim: int) -> np.ndarray:
    text = text.strip()
    if text == "alternating":
        return 2.0 * np.array([(-1.0) ** j * j for j in range(dim)])
    if text == "zeros":
        return np.zeros(dim)
    values = np.array([float(v) for v in text.split(",")])
    if values.size != dim:
        raise ValueError(f"expected {dim} entries, got {values.size}: {text!r}")
    return values


def _build_spec(process: str, section: dict) -> SdeSpec:
    if process == "ou":
        return OrnsteinUhlenbeck(
            theta=float(section["theta"]),
            mean=float(section["mean"]),
            sigma=float(section["sigma"]),
            x0=float(section["x0"]),
            horizon=float(section["horizon"]),
        )
    if process == "gbm":
        return GeometricBrownianMotion(
            mu=float(section["mu"]),
            sigma=float(section["sigma"]),
            x0=float(section["x0"]),
            horizon=float(section["horizon"]),
        )
    if process == "langevin":
        dim = int(section["dim"])
        mean = _parse_vector(section["mean"], dim)
        diag_text = section["covariance_diag"].strip()
        diag = np.ones(dim) if diag_text == "identity" else _parse_vector(diag_text, dim)
        x0 = _parse_vector(section["x0"], dim)
        return GaussianLangevin(
            covariance=np.diag(diag),
            mean=mean,
            x0=x0,
            horizon=float(section["horizon"]),
        )
    raise ValueError(f"unknown process {process!r} (expected ou, gbm or langevin)")


def load_config(path: str | None, seed_override: int | None = None,
                out_override: str | None = None, threads: int = 1) -> ExperimentConfig:
    """Read the INI config (all keys optional) and resolve the experiment."""
    parser = configparser.ConfigParser()
    for section, values in _DEFAULTS.items():
        parser[section] = dict(values)
    if path is not None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file {path} not found")
        parser.read(path)
    process = parser["experiment"]["process"].strip().lower()
    if process not in ("ou", "gbm", "langevin"):
        raise ValueError(f"unknown process {process!r}")
    spec = _build_spec(process, dict(parser[process]))
    seed = seed_override if seed_override is not None else int(parser["experiment"]["seed"])
    out_dir = out_override if out_override is not None else parser["experiment"]["out_dir"]
    eps_text = parser["eval"]["sinkhorn_epsilon"].strip()
    train_cfg = TrainConfig(
        learning_rate=float(parser["train"]["learning_rate"]),
        epochs=int(parser["train"]["epochs"]),
        batch_size=int(parser["train"]["batch_size"]),
        seed=stage_seed(seed, "train"),
        n_samples=int(parser["train"]["n_samples"]),
    )
    return ExperimentConfig(
        process=process,
        spec=spec,
        basis_size=int(parser["model"]["m"]),
        n_terms=int(parser["model"]["p"]),
        hidden=tuple(int(w) for w in parser["model"]["hidden"].split(",")),
        train=train_cfg,
        sim_level=int(parser["train"]["sim_level"]),
        eval_grid_size=int(parser["eval"]["grid_size"]),
        eval_samples=int(parser["eval"]["n_eval"]),
        realisations=int(parser["eval"]["realisations"]),
        sinkhorn_epsilon=None if eps_text == "auto" else float(eps_text),
        sinkhorn_max_iters=int(parser["eval"]["sinkhorn_max_iters"]),
        table_degree=int(parser["pce"]["table_degree"]),
        table_basis=int(parser["pce"]["table_basis"]),
        table_points=int(parser["pce"]["n_t"]),
        ode_step=float(parser["pce"]["ode_step"]),
        energy_degree=int(parser["pce"]["energy_degree"]),
        energy_basis=int(parser["pce"]["energy_basis"]),
        decompose_samples=int(parser["decompose"]["n_eval"]),
        reference_degree=int(parser["decompose"]["reference_degree"]),
        p_sweep=tuple(int(v) for v in parser["decompose"]["p_sweep"].split(",")),
        out_dir=out_dir,
        seed=seed,
        threads=max(1, threads),
    )


def _ensure_out(config: ExperimentConfig) -> str:
    os.makedirs(config.out_dir, exist_ok=True)
    return config.out_dir


def _write_csv(path: str, header: list[str], rows) -> None:
    import csv
    import tempfile

    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".csv")
    os.close(fd)
    try:
        with open(tmp, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(header)
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_simulate(config: ExperimentConfig) -> str:
    """Generate the training dataset and write it to <out>/dataset.csv."""
    out = _ensure_out(config)
    samples = make_dataset(
        config.spec,
        config.train.n_samples or 0,
        config.basis_size,
        config.sim_level,
        seed=stage_seed(config.seed, "simulate"),
    )
    path = os.path.join(out, "dataset.csv")
    save_dataset(samples, path)
    return path


def cmd_train(config: ExperimentConfig, dataset_path: str | None = None) -> str:
    """Train a fresh model on the dataset; writes model.npz and loss_history.csv."""
    out = _ensure_out(config)
    dataset_path = dataset_path or os.path.join(out, "dataset.csv")
    dataset = load_dataset(dataset_path)
    model = build_model(
        config.basis_size,
        config.n_terms,
        config.spec.dim,
        config.spec.horizon,
        list(config.hidden),
        seed=stage_seed(config.seed, "init"),
    )
    model, history = train(model, dataset, config.spec.x0, config.train)
    checkpoint = os.path.join(out, "model.npz")
    save_model(model, checkpoint)
    _write_csv(
        os.path.join(out, "loss_history.csv"),
        ["epoch", "loss"],
        [[str(epoch), repr(value)] for epoch, value in enumerate(history)],
    )
    return checkpoint


def _one_realisation(args) -> MetricsReport:
    model, config, seed = args
    return evaluate(
        model,
        config.spec,
        config.t_grid,
        config.eval_samples,
        seed=seed,
        sim_level=config.sim_level,
        sinkhorn_epsilon=config.sinkhorn_epsilon,
        sinkhorn_max_iters=config.sinkhorn_max_iters,
    )


def cmd_evaluate(config: ExperimentConfig, checkpoint: str | None = None) -> str:
    """Per-time metrics with 3-sigma bands across independent realisations."""
    out = _ensure_out(config)
    checkpoint = checkpoint or os.path.join(out, "model.npz")
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint {checkpoint} not found")
    model = load_model(checkpoint)
    base = stage_seed(config.seed, "evaluate")
    jobs = [(model, config, base + r) for r in range(config.realisations)]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            reports = list(pool.map(_one_realisation, jobs))
    else:
        reports = [_one_realisation(job) for job in jobs]
    l2 = np.stack([r.l2 for r in reports])
    rel = np.stack([r.rel_l2 for r in reports])
    w2 = np.stack([r.w2 for r in reports])
    times = reports[0].times

    def band(stack: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        mean = stack.mean(axis=0)
        if stack.shape[0] > 1:
            sigma = stack.std(axis=0, ddof=1)
        else:
            sigma = np.zeros_like(mean)
        return mean, 3.0 * sigma

    l2_m, l2_b = band(l2)
    rel_m, rel_b = band(rel)
    w2_m, w2_b = band(w2)
    rows = [
        [repr(float(v)) for v in row]
        for row in zip(times, l2_m, l2_b, rel_m, rel_b, w2_m, w2_b)
    ]
    path = os.path.join(out, "metrics.csv")
    _write_csv(path, ["t", "l2_mean", "l2_3sig", "rel_mean", "rel_3sig", "w2_mean", "w2_3sig"], rows)
    return path


def cmd_pce(config: ExperimentConfig) -> tuple[str, str]:
    """Propagator coefficient table plus a retained-energy defect report."""
    out = _ensure_out(config)
    spec = config.spec
    if isinstance(spec, OrnsteinUhlenbeck):
        affine = AffineSdeCoeffs.from_ou(spec)
        retained = lambda t, p, m: ou_retained_energy(spec, t, p, m)
        second = lambda t: ou_second_moment(spec, t)
    elif isinstance(spec, GeometricBrownianMotion):
        affine = AffineSdeCoeffs.from_gbm(spec)
        retained = lambda t, p, m: gbm_retained_energy(spec, t, p, m)
        second = lambda t: gbm_second_moment(spec, t)
    else:
        raise ValueError(f"pce stage supports ou and gbm, not {config.process!r}")
    table = propagator_solve(
        affine,
        spec.x0,
        config.table_degree,
        config.table_basis,
        spec.horizon,
        n_t=config.table_points,
        ode_step=config.ode_step,
    )
    table_path = os.path.join(out, "coefficients.csv")
    table.save_csv(table_path)
    rows = []
    for t in np.linspace(0.0, spec.horizon, 21)[1:]:
        energy = retained(float(t), config.energy_degree, config.energy_basis)
        moment = second(float(t))
        rows.append([repr(float(t)), repr(energy), repr(moment), repr(1.0 - energy / moment)])
    defect_path = os.path.join(out, "parseval.csv")
    _write_csv(defect_path, ["t", "retained_energy", "second_moment", "defect"], rows)
    return table_path, defect_path


def cmd_decompose(config: ExperimentConfig, checkpoint: str | None = None) -> str:
    """Truncation/approximation/reconstruction error split along a p-sweep."""
    out = _ensure_out(config)
    checkpoint = checkpoint or os.path.join(out, "model.npz")
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint {checkpoint} not found")
    model = load_model(checkpoint)
    spec = config.spec
    if not isinstance(spec, (OrnsteinUhlenbeck, GeometricBrownianMotion)):
        raise ValueError(f"decompose stage supports ou and gbm, not {config.process!r}")
    if config.sim_level < 8:
        raise ValueError("decompose needs sim_level >= 8 so the 257-point grid is dyadic")
    reference = analytic_table(spec, config.reference_degree, model.basis_size, n_t=257)
    seed = stage_seed(config.seed, "decompose")
    rows = []
    for p in config.p_sweep:
        if p > model.n_terms:
            continue
        dec = error_decomposition(
            model, reference, spec,
            n_eval=config.decompose_samples, seed=seed,
            sim_level=config.sim_level, n_terms=p,
        )
        rows.append([
            str(p),
            repr(dec.e_trunc),
            repr(dec.e_approx),
            repr(dec.e_recon),
            repr(dec.e_total),
            repr(dec.standard_error),
        ])
    path = os.path.join(out, "decomposition.csv")
    _write_csv(path, ["p", "e_trunc", "e_approx", "e_recon", "e_total", "mc_se"], rows)
    return path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="sdeonet",
        description="Seeded pipelines for chaos-expansion operator models of SDEs.",
    )
    parser.add_argument("command", choices=["simulate", "train", "evaluate", "pce", "decompose", "all"])
    parser.add_argument("--config", default=None, help="INI config file (defaults built in)")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default=None, help="output directory override")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for evaluation")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.seed, args.out, args.threads)
        if args.command in ("simulate", "all"):
            print(cmd_simulate(config))
        if args.command in ("train", "all"):
            print(cmd_train(config))
        if args.command in ("evaluate", "all"):
            print(cmd_evaluate(config))
        skip_reference_stages = args.command == "all" and config.process == "langevin"
        if args.command in ("pce", "all") and not skip_reference_stages:
            for path in cmd_pce(config):
                print(path)
        if args.command in ("decompose", "all") and not skip_reference_stages:
            print(cmd_decompose(config))
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        sys.stderr.write(
            "error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}) + "\n"
        )
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
