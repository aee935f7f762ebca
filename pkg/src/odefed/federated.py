"""FedAvg over clients that may run different ODE iteration counts, plus a
FedDF-style server-side distillation aggregator for comparison.

Clients are stateless: each round a sampled client receives the global
parameters, trains ``E`` local epochs at its own iteration count and returns
the full parameter set. The server averages in client-id order, weighting
each participant by its share of the participants' data.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .comms.checkpoint import serialized_size
from .comms.wire import FRAME_OVERHEAD
from .data import Dataset, PartitionSpec, batches
from .models import Model, ModelConfig, build_model, forward, parameter_layout
from .optim import sgd_step
from .paramset import IncongruentParametersError, ParameterSet
from .tensor import Tensor

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "feddf")


@dataclass(frozen=True)
class ClientSpec:
    client_id: int
    iterations: Optional[int] = None  # None: use the global model's C
    epochs: int = 1
    batch_size: int = 32
    lr: float = 0.05

    def model_config(self, global_config: ModelConfig) -> ModelConfig:
        if self.iterations is None:
            return global_config
        return global_config.with_iterations(self.iterations)


@dataclass(frozen=True)
class FedDFOptions:
    budget: Optional[int] = None  # None: the whole server pool
    steps: int = 50
    lr: float = 0.05
    temperature: float = 3.0
    batch_size: int = 32


@dataclass(frozen=True)
class FedConfig:
    clients: int
    fraction: float = 1.0
    rounds: int = 1
    seed: int = 0
    algorithm: str = "fedavg"
    feddf: FedDFOptions = field(default_factory=FedDFOptions)

    def __post_init__(self):
        if self.clients < 1:
            raise ValueError(f"clients: need K >= 1, got {self.clients}")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction: need 0 < r <= 1, got {self.fraction}")
        if self.rounds < 1:
            raise ValueError(f"rounds: need T >= 1, got {self.rounds}")
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.feddf.budget is not None and self.feddf.budget < 0:
            raise ValueError("feddf.budget must be >= 0 or unlimited")


@dataclass
class RoundMetrics:
    round: int
    selected: list[int]
    client_losses: list[float]
    loss: float
    top1: float
    top5: float
    bytes: int

    @property
    def mean_client_loss(self) -> float:
        return float(np.mean(self.client_losses))


class FedHistory(list):
    """Per-round metrics, with the final global parameters attached."""

    params: ParameterSet


def participants(K: int, r: float) -> int:
    return max(int(math.floor(r * K + 0.5)), 1)


def sample_clients(K: int, r: float, seed: int, t: int) -> list[int]:
    """Sorted ids of ``max(round(r*K), 1)`` clients drawn without replacement for round ``t``."""
    m = participants(K, r)
    if m >= K:
        return list(range(K))
    rng = np.random.default_rng([seed, t, 0x5E1EC7])
    return sorted(int(i) for i in rng.choice(K, size=m, replace=False))


def client_seed(seed: int, client_id: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, client_id, t]).generate_state(1)[0])


def inference_view(params: ParameterSet) -> ParameterSet:
    """Same arrays, no gradient tracking."""
    view = ParameterSet()
    for name, t in params.items():
        view[name] = Tensor(t.data, dtype=t.dtype)
    return view


def check_compatible(params: ParameterSet, config: ModelConfig) -> None:
    expected = [(name, shape) for name, shape, _, _ in parameter_layout(config)]
    got = params.shapes()
    if [n for n, _ in expected] != [n for n, _ in got]:
        missing = sorted({n for n, _ in expected} - {n for n, _ in got})[:3]
        extra = sorted({n for n, _ in got} - {n for n, _ in expected})[:3]
        raise IncongruentParametersError(
            f"parameters do not fit a {config.family} model with C={config.iterations}: "
            f"missing {missing}, unexpected {extra}"
        )
    for (name, want), (_, have) in zip(expected, got):
        if tuple(want) != tuple(have):
            raise IncongruentParametersError(f"parameter {name!r} has shape {have}, model expects {want}")


def evaluate(
    params: ParameterSet,
    config: ModelConfig,
    override_C: Optional[int],
    dataset: Dataset,
    batch_size: int = 500,
) -> tuple[float, float, float]:
    """``(mean cross-entropy, top-1, top-5)`` of ``params`` on ``dataset``."""
    model = Model(config, inference_view(params))
    k = min(5, dataset.class_count)
    loss_sum = 0.0
    hit1 = hit5 = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits = forward(model, Tensor(x), override_C)
        loss_sum += float(F.softmax_cross_entropy(logits, y).data) * len(y)
        order = np.argsort(-logits.data, axis=1, kind="stable")
        hit1 += int((order[:, 0] == y).sum())
        hit5 += int((order[:, :k] == y[:, None]).any(axis=1).sum())
    n = len(dataset)
    top5 = 1.0 if dataset.class_count <= 5 else hit5 / n
    return loss_sum / n, hit1 / n, top5


def client_update(
    global_params: ParameterSet,
    client: ClientSpec,
    shard: Sequence[int],
    dataset: Dataset,
    global_config: ModelConfig,
    seed: int = 0,
    t: int = 0,
) -> tuple[ParameterSet, float]:
    """Run ``E`` epochs of mini-batch SGD from ``global_params`` at the client's ``C``.

    Returns the updated parameters and the sample-weighted mean loss of the
    last epoch (for ``E = 0``, the loss of the untouched parameters).
    """
    cfg = client.model_config(global_config)
    check_compatible(global_params, cfg)
    model = Model(cfg, global_params.clone())
    if client.epochs <= 0:
        loss, _, _ = evaluate(model.params, cfg, None, dataset.subset(shard))
        return model.params, loss

    rng_seed = client_seed(seed, client.client_id, t)
    final = 0.0
    for epoch in range(client.epochs):
        total, count = 0.0, 0
        for xb, yb in batches(dataset, shard, client.batch_size, rng_seed, epoch):
            loss = F.softmax_cross_entropy(model(Tensor(xb)), yb)
            loss.backward()
            sgd_step(model.params, client.lr)
            total += float(loss.data) * len(yb)
            count += len(yb)
        final = total / count
    return model.params, final


def aggregate_weighted(local_params: Sequence[ParameterSet], n_k: Sequence[int]) -> ParameterSet:
    """Data-size-weighted mean of client parameter sets.

    Coefficients are ``n_k / sum(n_k)`` over the given clients. Per element,
    the weighted terms are summed in float64 in ascending order, which makes
    the result independent of client order, then rounded to float32.
    """
    if not local_params:
        raise ValueError("need at least one client to aggregate")
    if len(local_params) != len(n_k):
        raise ValueError(f"{len(local_params)} parameter sets but {len(n_k)} sizes")
    if any(n <= 0 for n in n_k):
        raise ValueError("every client weight n_k must be positive")
    first = local_params[0]
    for other in local_params[1:]:
        first.check_congruent(other, "client parameter sets")
    total = sum(int(n) for n in n_k)
    coefs = [int(n) / total for n in n_k]
    out = []
    for name in first:
        terms = np.stack([c * p[name].data.astype(np.float64) for c, p in zip(coefs, local_params)])
        terms.sort(axis=0)
        acc = terms[0].copy()
        for row in terms[1:]:
            acc += row
        out.append((name, acc.astype(np.float32)))
    return ParameterSet.from_arrays(out)


def ensemble_soft_labels(
    local_params: Sequence[ParameterSet],
    client_configs: Sequence[ModelConfig],
    images: np.ndarray,
    temperature: float,
    batch_size: int = 500,
) -> np.ndarray:
    """Mean over clients of temperature-softened class probabilities, each at its own ``C``."""
    acc = None
    for params, cfg in zip(local_params, client_configs):
        model = Model(cfg, inference_view(params))
        probs = np.concatenate(
            [
                F.softmax(forward(model, Tensor(images[s : s + batch_size])).data.astype(np.float64), temperature)
                for s in range(0, len(images), batch_size)
            ]
        )
        acc = probs if acc is None else acc + probs
    return (acc / len(local_params)).astype(np.float32)


def feddf_aggregate(
    local_params: Sequence[ParameterSet],
    n_k: Sequence[int],
    global_config: ModelConfig,
    client_configs: Sequence[ModelConfig],
    server_samples: Dataset,
    steps: int,
    lr: float,
    temperature: float = 3.0,
    batch_size: int = 32,
    seed: int = 0,
) -> ParameterSet:
    """Start from the weighted average, then distil the client ensemble into it.

    The student (global model at the global ``C``) is trained for ``steps``
    mini-batches from ``server_samples`` to match the ensemble's averaged
    softened predictions under a KL objective.
    """
    student = aggregate_weighted(local_params, n_k)
    if steps <= 0:
        return student
    if server_samples is None or len(server_samples) == 0:
        raise ValueError("FedDF needs a non-empty server sample pool")
    teacher = ensemble_soft_labels(local_params, client_configs, server_samples.images, temperature)
    model = Model(global_config, student)
    pool = np.arange(len(server_samples))
    done, epoch = 0, 0
    while done < steps:
        order = np.random.default_rng([seed, epoch]).permutation(pool)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss = F.softmax_kl(model(Tensor(server_samples.images[idx])), teacher[idx], temperature)
            loss.backward()
            sgd_step(model.params, lr)
            done += 1
            if done == steps:
                break
        epoch += 1
    return model.params


def server_pool(server_data: Optional[Dataset], budget: Optional[int], seed: int) -> Optional[Dataset]:
    """The fixed subset of server samples FedDF may use (``budget=None``: all of them)."""
    if server_data is None:
        return None
    if budget is None or budget >= len(server_data):
        return server_data
    if budget == 0:
        return None
    order = np.random.default_rng([seed, 0xD157]).permutation(len(server_data))
    return server_data.subset(np.sort(order[:budget]))


def transfer_bytes(params: ParameterSet) -> int:
    """Bytes of one framed parameter message."""
    return FRAME_OVERHEAD + serialized_size(params)


def aggregate_round(
    fed: FedConfig,
    global_config: ModelConfig,
    client_configs: Sequence[ModelConfig],
    local_params: Sequence[ParameterSet],
    n_k: Sequence[int],
    pool: Optional[Dataset],
    t: int,
) -> ParameterSet:
    """Server-side aggregation shared by the in-process and socket drivers."""
    if fed.algorithm == "feddf" and fed.feddf.steps > 0:
        if pool is None:
            raise ValueError("FedDF with steps > 0 needs server samples (budget > 0)")
        return feddf_aggregate(
            local_params,
            n_k,
            global_config,
            client_configs,
            pool,
            fed.feddf.steps,
            fed.feddf.lr,
            fed.feddf.temperature,
            fed.feddf.batch_size,
            seed=client_seed(fed.seed, 0xFEDDF, t),
        )
    return aggregate_weighted(local_params, n_k)


def _tag_client_error(exc: Exception, client_id: int) -> Exception:
    try:
        tagged = type(exc)(f"client {client_id}: {exc}")
    except Exception:
        tagged = RuntimeError(f"client {client_id}: {exc!r}")
    tagged.client_id = client_id
    return tagged


def run_fedavg(
    fed: FedConfig,
    global_config: ModelConfig,
    clients: Sequence[ClientSpec],
    partition: PartitionSpec,
    dataset: Dataset,
    eval_dataset: Dataset,
    server_data: Optional[Dataset] = None,
    init_params: Optional[ParameterSet] = None,
    workers: int = 1,
    on_round: Optional[Callable[[RoundMetrics], None]] = None,
) -> FedHistory:
    """Synchronous federated rounds: sample, broadcast, local SGD, aggregate, evaluate.

    ``fed.algorithm == "feddf"`` swaps the aggregation step for
    :func:`feddf_aggregate` over ``server_data`` limited to ``fed.feddf.budget``.
    The result is a pure function of the arguments; ``workers > 1`` only
    changes how client updates are scheduled.
    """
    K = fed.clients
    if partition.num_clients != K:
        raise ValueError(f"partition has {partition.num_clients} clients but K = {K}")
    by_id = {c.client_id: c for c in clients}
    if sorted(by_id) != list(range(K)):
        raise ValueError(f"client specs must cover ids 0..{K - 1} exactly once")
    params = init_params.clone() if init_params is not None else build_model(global_config, fed.seed).params
    check_compatible(params, global_config)
    msg_bytes = transfer_bytes(params)
    pool = server_pool(server_data, fed.feddf.budget, fed.seed) if fed.algorithm == "feddf" else None

    history = FedHistory()
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(1, fed.rounds + 1):
            selected = sample_clients(K, fed.fraction, fed.seed, t)

            def work(k, snapshot=params, t=t):
                try:
                    return client_update(snapshot, by_id[k], partition.assignments[k], dataset, global_config, fed.seed, t)
                except Exception as exc:
                    raise _tag_client_error(exc, k) from exc

            results = list(executor.map(work, selected)) if executor else [work(k) for k in selected]
            locals_ = [r[0] for r in results]
            n_k = [partition.client_counts[k] for k in selected]
            configs = [by_id[k].model_config(global_config) for k in selected]
            params = aggregate_round(fed, global_config, configs, locals_, n_k, pool, t)
            loss, top1, top5 = evaluate(params, global_config, None, eval_dataset)
            metrics = RoundMetrics(t, selected, [r[1] for r in results], loss, top1, top5, 2 * len(selected) * msg_bytes)
            log.info("round %d: clients=%s loss=%.4f top1=%.4f", t, selected, loss, top1)
            history.append(metrics)
            if on_round is not None:
                on_round(metrics)
    finally:
        if executor is not None:
            executor.shutdown()
    history.params = params
    return history
