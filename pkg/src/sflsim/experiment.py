"""Experiment orchestration: dataset/partition setup, variant sweeps,
metrics persistence, and the theory-check runner."""

from __future__ import annotations

import datetime
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import __version__, nn, theory
from .config import TrainingConfig, component_rng, component_seed, serialize_config
from .data import (
    Dataset,
    Partition,
    load_dataset,
    partition_dirichlet_skew,
    partition_quantity_skew,
    synth_dataset,
)
from .errors import ConfigError
from .losses import LabelDistribution
from .protocol import (
    ProtocolVariant,
    RoundSettings,
    ServerState,
    make_client_states,
    metrics_csv_header,
    metrics_csv_row,
    metrics_json_record,
    run_round,
)

log = logging.getLogger(__name__)


@dataclass
class ExperimentManifest:
    config_text: str
    version: str
    partition_file: str
    variant_files: dict[str, dict[str, str]]
    started_at: str
    finished_at: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "config": self.config_text,
                "partition_file": self.partition_file,
                "variant_files": self.variant_files,
                "started_at": self.started_at,
                "finished_at": self.finished_at,
            },
            sort_keys=True,
            indent=2,
        )


def build_datasets(cfg: TrainingConfig) -> tuple[Dataset, Dataset]:
    """Materialize the training and held-out evaluation datasets.

    Synthetic data draws a fresh evaluation set from its own seed stream;
    file datasets give up a per-class stratified holdout.
    """
    if cfg.dataset_kind == "synthetic":
        train = synth_dataset(
            cfg.classes,
            cfg.dim,
            cfg.per_class,
            cfg.separation,
            seed=component_seed(cfg.seed, "dataset"),
        )
        holdout = synth_dataset(
            cfg.classes,
            cfg.dim,
            cfg.eval_per_class,
            cfg.separation,
            seed=component_seed(cfg.seed, "eval_dataset"),
        )
        return train, holdout

    full = load_dataset(
        cfg.path,
        fmt=cfg.dataset_kind,
        labels_path=cfg.labels_path or None,
    )
    rng = component_rng(cfg.seed, "eval_dataset")
    eval_rows: list[np.ndarray] = []
    train_mask = np.ones(full.num_samples, dtype=bool)
    for c in range(full.num_classes):
        class_rows = np.flatnonzero(full.labels == c)
        if class_rows.size < cfg.eval_per_class + 1:
            raise ConfigError(
                f"class {c} has {class_rows.size} samples; cannot hold out "
                f"{cfg.eval_per_class} and keep training data"
            )
        chosen = rng.choice(class_rows, size=cfg.eval_per_class, replace=False)
        eval_rows.append(np.sort(chosen))
        train_mask[chosen] = False
    eval_idx = np.concatenate(eval_rows)
    train = Dataset(
        features=full.features[train_mask],
        labels=full.labels[train_mask],
        num_classes=full.num_classes,
    )
    holdout = Dataset(
        features=full.features[eval_idx],
        labels=full.labels[eval_idx],
        num_classes=full.num_classes,
    )
    return train, holdout


def build_partition(cfg: TrainingConfig, train: Dataset) -> Partition:
    seed = component_seed(cfg.seed, "partition")
    if cfg.scheme == "quantity":
        return partition_quantity_skew(train, cfg.clients, cfg.alpha, seed)
    return partition_dirichlet_skew(train, cfg.clients, cfg.beta, seed)


def _fresh_states(cfg: TrainingConfig, train: Dataset, partition: Partition):
    """Server/client state rebuilt from the same seed streams per variant."""
    model = nn.init_mlp(
        cfg.model_widths(train.dim), cfg.cut_index, component_rng(cfg.seed, "init")
    )
    client_part, server_part = nn.split_model(model)
    # metrics rows carry 1-based round numbers
    server = ServerState(
        server_layers=server_part, client_layers=client_part, round_index=1
    )
    sampler_rngs = [
        component_rng(cfg.seed, "minibatch", k) for k in range(partition.num_clients)
    ]
    clients = make_client_states(train, partition, sampler_rngs)
    return server, clients


def run_experiment(cfg: TrainingConfig) -> ExperimentManifest:
    """Run every configured variant for the configured number of rounds.

    All variants share the dataset, partition, initial model, and random
    streams, so their metrics are directly comparable. Writes one CSV and
    one NDJSON file per variant plus partition and manifest JSON files,
    all inside cfg.out_dir.
    """
    started = datetime.datetime.now(datetime.timezone.utc).isoformat()
    os.makedirs(cfg.out_dir, exist_ok=True)

    train, holdout = build_datasets(cfg)
    if cfg.batch_size > train.num_samples:
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds the {train.num_samples} "
            f"training samples"
        )
    partition = build_partition(cfg, train)
    partition_file = os.path.join(cfg.out_dir, "partition.json")
    with open(partition_file, "w") as fh:
        fh.write(partition.to_json())

    eval_prior = None
    if cfg.eval_rule == "balanced":
        counts = np.bincount(train.labels, minlength=train.num_classes)
        eval_prior = LabelDistribution.from_counts(counts)

    settings = RoundSettings(
        batch_size=cfg.batch_size,
        local_iters=cfg.local_iters,
        eta=cfg.eta,
        rho=cfg.rho,
        participation=cfg.participation,
        server_loss=cfg.server_loss,
        client_loss=cfg.client_loss,
        bytes_per_scalar=cfg.bytes_per_scalar,
        eval_rule=cfg.eval_rule,
    )

    variant_files: dict[str, dict[str, str]] = {}
    for name in cfg.variants:
        variant = ProtocolVariant(name)
        server, clients = _fresh_states(cfg, train, partition)
        participation_rng = component_rng(cfg.seed, "participation")
        csv_path = os.path.join(cfg.out_dir, f"{name}.csv")
        ndjson_path = os.path.join(cfg.out_dir, f"{name}.ndjson")
        log.info("running %s for %d rounds", name, cfg.rounds)
        with open(csv_path, "w") as csv_fh, open(ndjson_path, "w") as nd_fh:
            csv_fh.write(metrics_csv_header(train.num_classes) + "\n")
            for t in range(1, cfg.rounds + 1):
                do_eval = t % cfg.eval_period == 0 or t == cfg.rounds
                metrics = run_round(
                    variant,
                    server,
                    clients,
                    settings,
                    participation_rng,
                    eval_dataset=holdout if do_eval else None,
                    eval_prior=eval_prior,
                )
                csv_fh.write(metrics_csv_row(metrics, train.num_classes) + "\n")
                nd_fh.write(metrics_json_record(metrics) + "\n")
        variant_files[name] = {"csv": csv_path, "ndjson": ndjson_path}

    finished = datetime.datetime.now(datetime.timezone.utc).isoformat()
    manifest = ExperimentManifest(
        config_text=serialize_config(cfg),
        version=__version__,
        partition_file=partition_file,
        variant_files=variant_files,
        started_at=started,
        finished_at=finished,
    )
    with open(os.path.join(cfg.out_dir, "manifest.json"), "w") as fh:
        fh.write(manifest.to_json())
    return manifest


def run_theory_checks(
    num_classes: int = 10,
    dim: int | None = None,
    eta: float = 0.1,
    prior_grid: list[float] | None = None,
    n_total: int = 5000,
    out_dir: str = "runs",
    negative_control: bool = False,
) -> tuple[str, list[str]]:
    """Sweep the focus-class prior and verify the update orderings.

    Returns the report CSV path and the list of assertion failures (empty
    means every grid point passed). The negative control swaps the plain
    and adjusted columns before verification and must fail.
    """
    os.makedirs(out_dir, exist_ok=True)
    report = theory.crossover_sweep(
        num_classes=num_classes,
        dim=dim if dim is not None else num_classes,
        eta=eta,
        prior_grid=prior_grid,
        n_total=n_total,
    )
    if negative_control:
        report = report.with_swapped_losses()
    failures = theory.verify_report(report)
    report_path = os.path.join(out_dir, "theory_report.csv")
    with open(report_path, "w") as fh:
        fh.write(report.to_csv())
    return report_path, failures
