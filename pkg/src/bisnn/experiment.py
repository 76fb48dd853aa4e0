"""Training runs, temperature sweeps and evaluation with on-disk artifacts.

A run directory holds::

    manifest.json    resolved config, seeds, package version
    train.bsd        encoded training set (and test.bsd when available)
    metrics.csv      one row per epoch
    checkpoint.json  final latent weights / logits
    final.json       train/test metrics of every predictor
"""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (
    DIRECT, ENSEMBLE, MAP, accuracy, expected_calibration_error, mse, nll, predict_ensemble,
    predict_weights, uncertainty_grid,
)
from .data import (
    PopulationCodeSpec, SpikeDataset, encode_dataset, gen_1d_clusters, gen_two_moons,
)
from .network import CLASSIFICATION, REGRESSION, Checkpoint, Network
from .srm import FilterParams
from .train_bayes import BayesHyperparams, bayes_step, bernoulli_kl, map_weights, step_rng
from .train_st import fp_step, st_step

log = logging.getLogger(__name__)

RULES = ("st", "bayes", "fp")
SYNTHETIC = ("twomoons", "onedim")
TWO_MOONS_BOX = (-1.5, 2.5, -1.0, 1.5)
DEFAULT_EPOCHS = {"onedim": 10_000, "twomoons": 5_000, "dvs": 500}


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainRunConfig:
    rule: str = "bayes"
    dataset: str = "twomoons"
    epochs: int | None = None
    batch_size: int = 32
    eta: float = 0.05
    rho: float = 1e-4
    tau_gs: float = 1.0
    n_gs_samples: int = 1
    ensemble_size: int = 10
    clip: float | None = None
    hidden: list = field(default_factory=lambda: [64, 64])
    filter: dict = field(default_factory=dict)
    # encoding / synthetic data
    n_per_class: int = 200
    noise_std: float = 0.1
    n_units: int | None = None
    T: int = 100
    max_rate: float = 0.5
    n_test_per_class: int = 200
    # external data
    test_dataset: str | None = None
    dvs_dir: str | None = None
    dvs_digits: list = field(default_factory=lambda: [0, 1])
    dvs_limit: int | None = 200
    test_fraction: float = 0.25
    # seeds
    weight_seed: int = 0
    data_seed: int = 0
    gumbel_seed: int = 0
    readout_seed: int = 0
    order_seed: int = 0
    ensemble_seed: int = 0
    eval_every: int = 1
    ece_bins: int = 15
    last_step: bool = False
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.dataset not in (*SYNTHETIC, "dvs") and not Path(self.dataset).is_file():
            raise ConfigError(f"dataset {self.dataset!r} is neither a known generator nor an existing file")
        if self.dataset == "dvs" and (self.dvs_dir is None or not Path(self.dvs_dir).is_dir()):
            raise ConfigError("dataset 'dvs' needs an existing dvs_dir")
        if self.test_dataset is not None and not Path(self.test_dataset).is_file():
            raise ConfigError(f"test dataset {self.test_dataset!r} does not exist")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS.get(self.dataset, 100)
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.eta <= 0 or (self.rule == "bayes" and self.eta >= 1):
            raise ConfigError("eta must be positive (and below 1 for the bayes rule)")
        if self.n_units is None:
            self.n_units = 20 if self.dataset == "onedim" else 10
        self.hidden = [int(h) for h in self.hidden]
        self.filter_params  # validates

    @property
    def filter_params(self) -> FilterParams:
        try:
            return FilterParams(**self.filter)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad filter parameters: {exc}") from exc

    @property
    def hyper(self) -> BayesHyperparams:
        return BayesHyperparams(rho=self.rho, tau_gs=self.tau_gs, eta=self.eta,
                                ensemble_size=self.ensemble_size, n_samples=self.n_gs_samples)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainRunConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data


def encoding_spec(cfg: TrainRunConfig) -> PopulationCodeSpec:
    rng = (-1.2, 1.2) if cfg.dataset == "onedim" else (TWO_MOONS_BOX[0], TWO_MOONS_BOX[1])
    return PopulationCodeSpec(n_units=cfg.n_units, input_range=rng, max_rate=cfg.max_rate, T=cfg.T)


def make_synthetic(name, spec, seed, n_per_class=200, noise_std=0.1, split="train"):
    if name == "twomoons":
        pts, labels = gen_two_moons(n_per_class, noise_std, seed)
        kind = CLASSIFICATION
    elif name == "onedim":
        pts, labels = gen_1d_clusters(seed)
        kind = REGRESSION
    else:
        raise ConfigError(f"unknown synthetic dataset {name!r}")
    ds = encode_dataset(pts, labels, spec, seed, kind, dataset=name, split=split, data_seed=seed,
                        source_points=np.asarray(pts).tolist())
    return ds


def load_datasets(cfg: TrainRunConfig):
    """Return ``(train, test_or_None)``."""
    if cfg.dataset in SYNTHETIC:
        spec = encoding_spec(cfg)
        # held-out data uses a disjoint seed
        train = make_synthetic(cfg.dataset, spec, cfg.data_seed, cfg.n_per_class, cfg.noise_std, "train")
        test = make_synthetic(cfg.dataset, spec, cfg.data_seed + 1_000_003, cfg.n_test_per_class,
                              cfg.noise_std, "test")
        return train, test
    if cfg.dataset == "dvs":
        from .events import BinningSpec, ingest_directory

        full = ingest_directory(cfg.dvs_dir, BinningSpec(T=cfg.T), cfg.dvs_digits, limit=cfg.dvs_limit)
        return split_dataset(full, cfg.test_fraction, cfg.data_seed)
    train = SpikeDataset.load(cfg.dataset)
    test = SpikeDataset.load(cfg.test_dataset) if cfg.test_dataset else None
    return train, test


def split_dataset(ds: SpikeDataset, test_fraction: float, seed: int):
    """Stratified random split into ``(train, test)``."""
    rng = np.random.default_rng(seed)
    test_idx = []
    for c in np.unique(ds.targets):
        idx = np.flatnonzero(ds.targets == c)
        rng.shuffle(idx)
        test_idx.extend(idx[: int(round(test_fraction * len(idx)))])
    test_mask = np.zeros(ds.n_examples, dtype=bool)
    test_mask[test_idx] = True
    return ds.subset(np.flatnonzero(~test_mask)), ds.subset(np.flatnonzero(test_mask))


def build_network(cfg: TrainRunConfig, train: SpikeDataset) -> Network:
    n_readout = train.n_classes if train.kind == CLASSIFICATION else np.shape(train.targets)[1]
    return Network.build(train.n_inputs, cfg.hidden, n_readout, train.kind,
                         params=cfg.filter_params, readout_seed=cfg.readout_seed)


# ---------------------------------------------------------------- training


def forward_weights(rule: str, weights):
    """Weights a deterministic predictor runs with for a given rule."""
    return list(weights) if rule == "fp" else map_weights(list(weights))


def evaluate(net, rule, weights, ds: SpikeDataset, predictor=MAP, K=10, seed=0,
             ece_bins=15, last_step=False) -> dict:
    x, y = ds.batch(np.arange(ds.n_examples))
    if predictor == MAP or rule != "bayes":
        rec = predict_weights(net, forward_weights(rule, weights), x, y, MAP, last_step)
    else:
        rec = predict_ensemble(net, weights, x, K, seed, y, last_step)
    if net.kind == CLASSIFICATION:
        return {"accuracy": accuracy(rec), "nll": nll(rec), "ece": expected_calibration_error(rec, ece_bins)}
    return {"mse": mse(rec)}


def fit(net: Network, cfg: TrainRunConfig, train: SpikeDataset, weights=None, on_epoch=None):
    """Run the configured rule for ``cfg.epochs`` epochs.

    Returns ``(weights, rows)``. On a non-finite update raises
    :class:`TrainingDiverged` carrying the last finite weights.
    """
    if weights is None:
        weights = net.init_weights(np.random.default_rng(cfg.weight_seed))
    order = np.random.default_rng(cfg.order_seed)
    hyper = cfg.hyper
    priors = hyper.priors_for(weights)
    rows = [_eval_row(net, cfg, weights, train, 0, None, priors)]
    if on_epoch:
        on_epoch(rows[-1])
    step = 0
    N = train.n_examples
    for epoch in range(1, cfg.epochs + 1):
        perm = order.permutation(N)
        total = 0.0
        for start in range(0, N, cfg.batch_size):
            x, y = train.batch(perm[start : start + cfg.batch_size])
            try:
                if cfg.rule == "st":
                    new, losses = st_step(weights, x, y, cfg.eta, net, cfg.clip)
                elif cfg.rule == "fp":
                    new, losses = fp_step(weights, x, y, cfg.eta, net)
                else:
                    new, losses = bayes_step(weights, x, y, hyper, net, step_rng(cfg.gumbel_seed, step))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}, step {step}: {exc}", weights, rows) from exc
            weights = new
            total += float(np.sum(losses))
            step += 1
        evaluate_now = epoch % cfg.eval_every == 0 or epoch == cfg.epochs
        rows.append(_eval_row(net, cfg, weights, train, epoch, total / N, priors, evaluate_now))
        if on_epoch:
            on_epoch(rows[-1])
    return weights, rows


def _eval_row(net, cfg, weights, train, epoch, train_loss, priors, evaluate_now=True) -> dict:
    row = {"epoch": epoch, "train_loss": train_loss}
    metrics = evaluate(net, cfg.rule, weights, train, MAP, ece_bins=cfg.ece_bins,
                       last_step=cfg.last_step) if evaluate_now else {}
    keys = ("accuracy", "nll", "ece") if net.kind == CLASSIFICATION else ("mse",)
    row.update({k: metrics.get(k) for k in keys})
    if cfg.rule == "bayes":
        kl = bernoulli_kl(weights, priors)
        row["kl"] = kl
        row["free_energy"] = None if train_loss is None else train_loss + cfg.rho * kl
    return row


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: "" if v is None else repr(v) if isinstance(v, float) else v
                         for k, v in row.items()})
    return buf.getvalue()


def manifest(cfg: TrainRunConfig, **extra) -> dict:
    return {
        "package": "bisnn",
        "version": __version__,
        "config": cfg.to_dict(),
        "resolved": {
            "filter": cfg.filter_params.to_dict(),
            "encoding": asdict(encoding_spec(cfg)) if cfg.dataset in SYNTHETIC else None,
            "weight_init": "uniform(-0.1, 0.1)",
            "readout_init": "uniform(-1/sqrt(n_out), 1/sqrt(n_out)), frozen",
            "decision": "last-step softmax" if cfg.last_step else "time-averaged softmax",
            "gumbel_stream": "Philox key = (step << 64) | gumbel_seed",
        },
        "seeds": {k: getattr(cfg, k) for k in
                  ("weight_seed", "data_seed", "gumbel_seed", "readout_seed", "order_seed", "ensemble_seed")},
        **extra,
    }


def final_metrics(net, cfg, weights, train, test) -> dict:
    out = {}
    for split, ds in (("train", train), ("test", test)):
        if ds is None:
            continue
        out[split] = {MAP: evaluate(net, cfg.rule, weights, ds, MAP, ece_bins=cfg.ece_bins,
                                    last_step=cfg.last_step)}
        if cfg.rule == "bayes":
            out[split][f"{ENSEMBLE}-{cfg.ensemble_size}"] = evaluate(
                net, cfg.rule, weights, ds, ENSEMBLE, cfg.ensemble_size, cfg.ensemble_seed,
                cfg.ece_bins, cfg.last_step)
    return out


def run_train(cfg: TrainRunConfig) -> dict:
    """Train one model and write its run directory; returns the final metrics."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_datasets(cfg)
    net = build_network(cfg, train)
    (out / "manifest.json").write_text(json.dumps(manifest(
        cfg, data={"n_train": train.n_examples, "n_test": None if test is None else test.n_examples,
                   "T": train.T, "n_inputs": train.n_inputs}), indent=2))
    train.save(out / "train.bsd")
    if test is not None:
        test.save(out / "test.bsd")
    hyper = cfg.hyper.to_dict() if cfg.rule == "bayes" else {"eta": cfg.eta, "clip": cfg.clip}
    try:
        weights, rows = fit(net, cfg, train)
    except TrainingDiverged as exc:
        _, last_good, rows = exc.args
        Checkpoint(net, last_good, cfg.rule, hyper).save(out / "checkpoint.json")
        (out / "metrics.csv").write_text(rows_to_csv(rows))
        raise
    Checkpoint(net, weights, cfg.rule, hyper).save(out / "checkpoint.json")
    (out / "metrics.csv").write_text(rows_to_csv(rows))
    metrics = final_metrics(net, cfg, weights, train, test)
    (out / "final.json").write_text(json.dumps(metrics, indent=2))
    if cfg.dataset == "onedim":
        write_regression_curve(net, cfg, weights, out / "curve.csv")
    log.info("run %s finished: %s", out, metrics)
    return metrics


def write_regression_curve(net, cfg, weights, path, n_points: int = 121):
    """MAP and ensemble predictions on a dense 1D line (x, map, ens_mean, ens_std)."""
    spec = encoding_spec(cfg)
    xs = np.linspace(*spec.input_range, n_points)[:, None]
    ds = encode_dataset(xs, xs ** 3, spec, cfg.data_seed + 7, REGRESSION)
    x, _ = ds.batch(np.arange(ds.n_examples))
    map_rec = predict_weights(net, forward_weights(cfg.rule, weights), x)
    lines = ["x,map,ens_mean,ens_std"]
    if cfg.rule == "bayes":
        ens = predict_ensemble(net, weights, x, cfg.ensemble_size, cfg.ensemble_seed)
        mean, std = ens.mean[:, 0], ens.std[:, 0]
    else:
        mean, std = map_rec.mean[:, 0], np.zeros(n_points)
    for xi, m, em, es in zip(xs[:, 0], map_rec.mean[:, 0], mean, std):
        lines.append(",".join(repr(float(v)) for v in (xi, m, em, es)))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- sweep


def write_grid(path, points, probs):
    lines = ["x,y,p"] + [f"{float(x)!r},{float(y)!r},{float(p)!r}" for (x, y), p in zip(points, probs)]
    Path(path).write_text("\n".join(lines) + "\n")


def run_grids(cfg: TrainRunConfig, resolution: int = 40, bbox=TWO_MOONS_BOX) -> dict:
    """Write MAP (and ensemble) class-1 probability grids for a finished 2D run."""
    ckpt = Checkpoint.load(Path(cfg.out_dir) / "checkpoint.json")
    spec = encoding_spec(cfg)
    grids = {}
    predictors = [MAP, ENSEMBLE] if ckpt.rule == "bayes" else [MAP]
    for predictor in predictors:
        mode = DIRECT if ckpt.rule == "fp" else predictor
        points, probs = uncertainty_grid(ckpt.network, ckpt.weights, bbox, resolution, spec, mode,
                                         cfg.ensemble_size, cfg.ensemble_seed,
                                         encoding_seed=cfg.data_seed + 17)
        write_grid(Path(cfg.out_dir) / f"grid_{predictor}.csv", points, probs)
        grids[predictor] = probs
    return grids


def _sweep_member(cfg: TrainRunConfig):
    metrics = run_train(cfg)
    grids = run_grids(cfg) if cfg.dataset == "twomoons" else {}
    return metrics, grids


def run_sweep(cfg: TrainRunConfig, rho_list, include_st: bool = False, jobs: int = 1) -> dict:
    """Bayes runs for every temperature (shared data seed), plus an optional ST run."""
    rho_list = [float(r) for r in rho_list]
    if not rho_list:
        raise ConfigError("sweep needs at least one rho value")
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    members = {f"rho_{r!r}": replace(cfg, rule="bayes", rho=r, out_dir=str(root / f"rho_{r!r}"))
               for r in rho_list}
    if include_st:
        members["st"] = replace(cfg, rule="st", out_dir=str(root / "st"))
    (root / "manifest.json").write_text(json.dumps(manifest(
        cfg, sweep={"rho": rho_list, "include_st": include_st, "members": list(members)}), indent=2))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = dict(zip(members, pool.map(_sweep_member, members.values())))
    else:
        results = {name: _sweep_member(m) for name, m in members.items()}

    table = []
    for name, (metrics, _) in results.items():
        row = {"run": name, "rho": members[name].rho if members[name].rule == "bayes" else None}
        for split in ("train", "test"):
            for predictor, vals in metrics.get(split, {}).items():
                for key, value in vals.items():
                    row[f"{split}_{predictor}_{key}"] = value
        table.append(row)
    keys = sorted({k for row in table for k in row}, key=lambda k: (k not in ("run", "rho"), k))
    table = [{k: row.get(k) for k in keys} for row in table]
    (root / "comparison.csv").write_text(rows_to_csv(table))
    summary = {"rho": rho_list, "runs": {name: m for name, (m, _) in results.items()}}
    if include_st and cfg.dataset == "twomoons":
        low = f"rho_{min(rho_list)!r}"
        st_map = results["st"][1][MAP] > 0.5
        bayes_map = results[low][1][MAP] > 0.5
        summary["st_vs_low_rho_disagreement"] = {"reference": low,
                                                 "fraction": float(np.mean(st_map != bayes_map))}
    (root / "sweep.json").write_text(json.dumps(summary, indent=2))
    return summary


# ---------------------------------------------------------------- eval


def run_eval(checkpoint_path, dataset_path, predictor: str = "all", K: int = 10, seed: int = 0,
             ece_bins: int = 15, last_step: bool = False) -> dict:
    """Metrics of a saved checkpoint on a dataset file.

    Bayes checkpoints report MAP and ensemble-K under ``predictor='all'``.
    """
    ckpt = Checkpoint.load(checkpoint_path)
    ds = SpikeDataset.load(dataset_path)
    if ds.n_inputs != ckpt.network.specs[0].n_in or ds.kind != ckpt.network.kind:
        raise ValueError(f"dataset ({ds.kind}, {ds.n_inputs} inputs) does not fit the checkpoint "
                         f"({ckpt.network.kind}, {ckpt.network.specs[0].n_in} inputs)")
    wanted = [MAP, ENSEMBLE] if predictor == "all" else [predictor]
    if ckpt.rule != "bayes":
        wanted = [MAP]
    out = {"checkpoint": str(checkpoint_path), "dataset": str(dataset_path), "rule": ckpt.rule}
    for p in wanted:
        name = MAP if p == MAP else f"{ENSEMBLE}-{K}"
        out[name] = evaluate(ckpt.network, ckpt.rule, ckpt.weights, ds, p, K, seed, ece_bins, last_step)
    return out
