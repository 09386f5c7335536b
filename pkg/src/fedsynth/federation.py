"""FedGAN-style federation: local epochs, weighted parameter averaging, broadcast.

The server side is the pure function :func:`fedgan_aggregate`.  Everything
else simulates clients in-process; :mod:`fedsynth.transport` moves the same
messages over a local socket.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from .data import SlicePair, concat_datasets
from .metrics import evaluate_model
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    ParameterMismatchError,
    ParameterSet,
    build_discriminator,
    build_generator,
    export_parameters,
    import_parameters,
)
from .report import ComparisonReport, build_report
from .training import (
    EpochStats,
    Hyperparams,
    Optimizers,
    epoch_rng,
    make_optimizers,
    optimizer_state_sets,
    restore_optimizer_state,
    train_local_epoch,
)

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-12


class ClientTrainingError(RuntimeError):
    def __init__(self, client_id: str, cause: BaseException):
        super().__init__(f"client {client_id!r}: {cause}")
        self.client_id = client_id


@dataclass
class ClientState:
    client_id: str
    dataset: Sequence[SlicePair]
    generator: object
    discriminator: object
    hyper: Hyperparams
    optimizers: Optimizers | None = None

    def __post_init__(self):
        if len(self.dataset) < 1:
            raise ValueError(f"client {self.client_id!r} has an empty dataset")
        if self.optimizers is None:
            self.optimizers = make_optimizers(self.generator, self.discriminator, self.hyper)

    @property
    def dataset_size(self) -> int:
        return len(self.dataset)


@dataclass
class RoundRecord:
    round_index: int
    client_ids: list[str]
    weights: list[float]
    aggregated_g: ParameterSet
    aggregated_d: ParameterSet
    client_stats: list[EpochStats] = field(default_factory=list)
    client_digests: list[str] = field(default_factory=list)

    def log_entry(self) -> dict:
        return {
            "round_index": self.round_index,
            "client_ids": self.client_ids,
            "weights": self.weights,
            "client_param_hashes": self.client_digests,
            "aggregate_hash": self.aggregated_g.digest() + ":" + self.aggregated_d.digest(),
        }


def make_client(
    client_id: str,
    dataset: Sequence[SlicePair],
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    hyper: Hyperparams,
    init_seed: int,
) -> ClientState:
    """A client whose networks are initialised from ``init_seed`` (shared across a federation)."""
    gen = build_generator(gen_config, init_seed)
    disc = build_discriminator(disc_config, init_seed + 1)
    return ClientState(client_id, list(dataset), gen, disc, hyper)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def aggregation_weights(sizes: Sequence[int], mode: str = "size") -> list[float]:
    if not sizes:
        raise ValueError("no clients")
    if mode == "equal":
        return [1.0 / len(sizes)] * len(sizes)
    if mode != "size":
        raise ValueError(f"unknown weighting mode {mode!r}")
    if any(s < 0 for s in sizes):
        raise ValueError("dataset sizes must be >= 0")
    total = sum(sizes)
    if total <= 0:
        raise ValueError("dataset sizes sum to zero")
    return [s / total for s in sizes]


def fedgan_aggregate(param_sets: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    """Entry-wise convex combination ``sum_k weights[k] * param_sets[k]``.

    Accumulates in float64 and rounds once to float32, so identical inputs
    come back bit-identical and every value stays within the client range.
    """
    if not param_sets:
        raise ValueError("need at least one parameter set")
    if len(weights) != len(param_sets):
        raise ValueError(f"{len(param_sets)} parameter sets but {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError(f"weights must be finite and non-negative, got {list(weights)}")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights sum to zero")
    if abs(total - 1.0) > WEIGHT_TOL:
        raise ValueError(f"weights must sum to 1 (got {total!r}); normalise them first")
    first = param_sets[0]
    for ps in param_sets[1:]:
        first.check_compatible(ps)

    names, arrays = [], []
    for i, name in enumerate(first.names):
        acc = w[0] * first.arrays[i].astype(np.float64)
        for k in range(1, len(param_sets)):
            acc += w[k] * param_sets[k].arrays[i].astype(np.float64)
        out = acc.astype(np.float32)
        out.setflags(write=False)
        names.append(name)
        arrays.append(out)
    return ParameterSet._trusted(names, arrays)


# ---------------------------------------------------------------------------
# rounds
# ---------------------------------------------------------------------------


def _client_rngs(clients, epoch, rng):
    if rng is None:
        return [epoch_rng(c.hyper.seed, epoch) for c in clients]
    return [np.random.default_rng(int(rng.integers(0, 2**63))) for _ in clients]


def _local_train(client: ClientState, round_index: int, crng, local_epochs: int) -> EpochStats:
    try:
        stats = None
        for k in range(local_epochs):
            e = round_index * local_epochs + k
            r = crng if k == 0 else epoch_rng(client.hyper.seed, e)
            stats = train_local_epoch(
                client.generator, client.discriminator, client.dataset, client.hyper, e, r,
                client.optimizers,
            )
        return stats
    except Exception as exc:
        raise ClientTrainingError(client.client_id, exc) from exc


def run_round(
    clients: Sequence[ClientState],
    round_index: int,
    rng: np.random.Generator | None = None,
    weighting: str = "size",
    aggregate_discriminator: bool = True,
    parallel: bool = False,
    local_epochs: int = 1,
) -> RoundRecord:
    """Local training on every client, then aggregate and broadcast.

    With ``rng=None`` each client draws its epoch randomness from
    ``epoch_rng(client.hyper.seed, epoch)``, exactly like centralized
    training, which is what makes one-client federation equal plain training.
    """
    if not clients:
        raise ValueError("no clients")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids: {ids}")
    clients = sorted(clients, key=lambda c: c.client_id)
    rngs = _client_rngs(clients, round_index * local_epochs, rng)

    if parallel and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=len(clients)) as pool:
            futures = [
                pool.submit(_local_train, c, round_index, r, local_epochs)
                for c, r in zip(clients, rngs)
            ]
            stats = [f.result() for f in futures]
    else:
        stats = [_local_train(c, round_index, r, local_epochs) for c, r in zip(clients, rngs)]

    g_sets = [export_parameters(c.generator) for c in clients]
    d_sets = [export_parameters(c.discriminator) for c in clients]
    digests = [g.digest() + ":" + d.digest() for g, d in zip(g_sets, d_sets)]
    weights = aggregation_weights([c.dataset_size for c in clients], weighting)
    try:
        agg_g = fedgan_aggregate(g_sets, weights)
        agg_d = fedgan_aggregate(d_sets, weights)
    except ParameterMismatchError as exc:
        raise ParameterMismatchError(f"round {round_index}: clients are not shape-compatible: {exc}") from exc

    for c in clients:
        import_parameters(c.generator, agg_g)
        if aggregate_discriminator:
            import_parameters(c.discriminator, agg_d)

    return RoundRecord(
        round_index=round_index,
        client_ids=[c.client_id for c in clients],
        weights=weights,
        aggregated_g=agg_g,
        aggregated_d=agg_d,
        client_stats=stats,
        client_digests=digests,
    )


# ---------------------------------------------------------------------------
# checkpoints of a whole federation
# ---------------------------------------------------------------------------


def save_federation_checkpoint(path, clients: Sequence[ClientState], round_index: int, metadata: dict | None = None):
    """Shared weights plus every client's optimizer moments after ``round_index``."""
    first = clients[0]
    sets = {
        "generator": export_parameters(first.generator),
        "discriminator": export_parameters(first.discriminator),
    }
    steps = {}
    for c in clients:
        for prefix, opt, model in (
            ("opt_g", c.optimizers.generator, c.generator),
            ("opt_d", c.optimizers.discriminator, c.discriminator),
        ):
            extra, step = optimizer_state_sets(opt, model, f"{c.client_id}.{prefix}")
            sets.update(extra)
            steps[f"{c.client_id}.{prefix}"] = step
        # discriminators diverge when they are not aggregated
        sets[f"{c.client_id}.discriminator"] = export_parameters(c.discriminator)
    meta = {"round_index": round_index, "epoch": round_index, "optimizer_steps": steps, **(metadata or {})}
    return checkpoint.save(path, sets, meta)


def restore_federation_checkpoint(path, clients: Sequence[ClientState]) -> int:
    """Load a checkpoint into ``clients``; returns the next round index."""
    sets, meta = checkpoint.load(path)
    for c in clients:
        import_parameters(c.generator, sets["generator"])
        import_parameters(c.discriminator, sets.get(f"{c.client_id}.discriminator", sets["discriminator"]))
        for prefix, opt, model in (
            ("opt_g", c.optimizers.generator, c.generator),
            ("opt_d", c.optimizers.discriminator, c.discriminator),
        ):
            key = f"{c.client_id}.{prefix}"
            restore_optimizer_state(opt, model, sets, key, meta["optimizer_steps"].get(key, 0))
    return int(meta["round_index"]) + 1


def run_federated_training(
    clients: Sequence[ClientState],
    num_rounds: int,
    rng: np.random.Generator | None = None,
    start_round: int = 0,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    round_log: str | Path | None = None,
    epoch_log: Callable[[int, str, EpochStats], None] | None = None,
    metadata: dict | None = None,
    **round_kwargs,
) -> tuple[tuple[ParameterSet, ParameterSet], list[RoundRecord]]:
    """Run rounds ``start_round .. start_round + num_rounds - 1`` in order."""
    if num_rounds < 1:
        raise ValueError("num_rounds must be >= 1")
    records = []
    for r in range(start_round, start_round + num_rounds):
        rec = run_round(clients, r, rng=rng, **round_kwargs)
        records.append(rec)
        if epoch_log is not None:
            for cid, st in zip(rec.client_ids, rec.client_stats):
                epoch_log(r, cid, st)
        if round_log is not None:
            with Path(round_log).open("a") as f:
                f.write(json.dumps(rec.log_entry(), sort_keys=True) + "\n")
        last = r == start_round + num_rounds - 1
        if checkpoint_dir is not None and ((checkpoint_every and (r + 1) % checkpoint_every == 0) or last):
            save_federation_checkpoint(
                Path(checkpoint_dir) / f"round_{r:04d}.ckpt", clients, r, metadata
            )
    return (records[-1].aggregated_g, records[-1].aggregated_d), records


# ---------------------------------------------------------------------------
# the four-model experiment
# ---------------------------------------------------------------------------


def train_model(
    datasets: Sequence[Sequence[SlicePair]],
    gen_config: GeneratorConfig,
    disc_config: DiscriminatorConfig,
    hyper: Hyperparams,
    init_seed: int | None = None,
    weighting: str = "size",
    client_ids: Sequence[str] | None = None,
    **kwargs,
):
    """Train one model; one dataset = single-site training, several = federation."""
    init_seed = hyper.seed if init_seed is None else init_seed
    ids = list(client_ids) if client_ids else [f"client-{i}" for i in range(len(datasets))]
    clients = [
        make_client(cid, ds, gen_config, disc_config, hyper, init_seed)
        for cid, ds in zip(ids, datasets)
    ]
    _, records = run_federated_training(clients, hyper.total_epochs, weighting=weighting, **kwargs)
    return clients[0].generator, records


def run_experiment_matrix(
    site_a: Sequence[SlicePair],
    site_b: Sequence[SlicePair],
    test_a: Sequence[SlicePair],
    test_b: Sequence[SlicePair],
    hyper: Hyperparams,
    gen_config: GeneratorConfig | None = None,
    disc_config: DiscriminatorConfig | None = None,
    weighting: str = "size",
    config_echo: dict | None = None,
    progress: Callable[[str], None] | None = None,
) -> ComparisonReport:
    """Train Baseline-A, Baseline-B, Central and 2-client FL; evaluate on both test sets."""
    for name, ds in (("site_a", site_a), ("site_b", site_b), ("test_a", test_a), ("test_b", test_b)):
        if len(ds) == 0:
            raise ValueError(f"{name} is empty")
    res = {p.shape for ds in (site_a, site_b, test_a, test_b) for p in ds}
    if len(res) != 1:
        raise ValueError(f"datasets mix resolutions: {sorted(res)}")
    (r, _), = res
    gen_config = gen_config or GeneratorConfig(resolution=r)
    disc_config = disc_config or DiscriminatorConfig()

    plans = {
        "baseline-a": [site_a],
        "baseline-b": [site_b],
        "central": [concat_datasets(site_a, site_b)],
        "federated": [site_a, site_b],
    }
    scores = {}
    for name, datasets in plans.items():
        if progress:
            progress(f"training {name}")
        ids = ["A", "B"] if name == "federated" else [name]
        gen, _ = train_model(datasets, gen_config, disc_config, hyper, weighting=weighting, client_ids=ids)
        scores[name] = {"A": evaluate_model(gen, test_a), "B": evaluate_model(gen, test_b)}
    pair_ids = {"A": [p.pair_id for p in test_a], "B": [p.pair_id for p in test_b]}
    return build_report(scores, pair_ids, config=config_echo or {})
