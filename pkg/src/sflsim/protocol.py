"""Round engine: split training with concatenated activations, baselines,
federated aggregation, and communication accounting.

One global round works as follows for the concatenated variants. Every
participating client draws a minibatch whose size is proportional to its
local data size, runs its client-side replica forward, and uploads the
activation block plus labels. The server stacks the blocks in ascending
client-id order into a single batch, takes one descent step on the
server-side model, slices the batch's input gradient back per client, and
each client finishes backprop on its replica. After the configured number
of local iterations the client-side replicas are averaged, weighted by
local data size.

The per-client gradient blocks are taken at the server-side weights from
before the server's own step, and at batch-mean scale (1/B over the
concatenated batch, not 1/B_k), so the composed computation is exactly one
backward pass over the concatenated batch. When the client-bound loss
differs from the server loss (different prior adjustments), a second
backward pass with the per-client adjusted upstream produces the blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import nn
from .data import (
    BatchPlan,
    Dataset,
    MinibatchSampler,
    allocate_minibatch_sizes,
    estimate_label_distribution,
    sample_minibatch,
)
from .errors import ProtocolError
from .losses import (
    LabelDistribution,
    cross_entropy,
    log_prior,
    logit_adjusted_ce,
    per_sample_ce,
    predict,
    predict_balanced,
)

Array = np.ndarray


class ProtocolVariant(str, Enum):
    SCALA = "scala"
    CA_SFL = "ca_sfl"
    LLA_SFL = "lla_sfl"
    SPLITFED_V1 = "splitfed_v1"
    FEDAVG = "fedavg"


# (server-side loss, client-bound loss); "adjusted" means prior-adjusted
# cross-entropy: by the concatenated-batch distribution on the server side
# of the concatenated variants, by the client's local distribution on the
# client-bound side and in the per-client topologies.
_DEFAULT_LOSSES = {
    ProtocolVariant.SCALA: ("adjusted", "adjusted"),
    ProtocolVariant.CA_SFL: ("plain", "plain"),
    ProtocolVariant.LLA_SFL: ("adjusted", "adjusted"),
    ProtocolVariant.SPLITFED_V1: ("plain", "plain"),
    ProtocolVariant.FEDAVG: ("plain", "plain"),
}


@dataclass
class RoundSettings:
    """Knobs the round engine needs; one instance is shared across rounds."""

    batch_size: int
    local_iters: int
    eta: float
    rho: float = 1.0
    participation: str = "fixed-fraction"  # or "bernoulli"
    server_loss: str = "auto"  # auto | plain | adjusted
    client_loss: str = "auto"
    bytes_per_scalar: int = 8
    eval_rule: str = "plain"  # or "balanced"

    def resolved_losses(self, variant: ProtocolVariant) -> tuple[str, str]:
        default_s, default_c = _DEFAULT_LOSSES[variant]
        server = default_s if self.server_loss == "auto" else self.server_loss
        client = default_c if self.client_loss == "auto" else self.client_loss
        for name in (server, client):
            if name not in ("plain", "adjusted"):
                raise ValueError(f"unknown loss variant {name!r}")
        return server, client


@dataclass
class ClientState:
    """One protocol participant: local data view plus its model replica."""

    client_id: int
    dataset: Dataset
    indices: Array
    sampler: MinibatchSampler
    prior: LabelDistribution
    model: list[nn.Layer] | None = None

    @property
    def data_size(self) -> int:
        return self.indices.size


@dataclass
class ServerState:
    """Server-side model plus the current global client-side model."""

    server_layers: list[nn.Layer]
    client_layers: list[nn.Layer]
    round_index: int = 0

    def __post_init__(self) -> None:
        cut_width = nn.stack_output_width(self.client_layers)
        expected = nn.stack_input_width(self.server_layers)
        if cut_width is not None and expected is not None and cut_width != expected:
            raise ValueError(
                f"client part ends at width {cut_width} but server part "
                f"expects {expected}"
            )


@dataclass
class ActivationBatch:
    """One client's uploaded activations and labels for one iteration."""

    client_id: int
    activations: Array
    labels: Array

    def __post_init__(self) -> None:
        if self.activations.ndim != 2:
            raise ValueError("activations must be 2-D")
        if self.labels.shape != (self.activations.shape[0],):
            raise ValueError("labels must align with activation rows")


@dataclass
class ConcatenatedBatch:
    """Row-stacked activations of all participants, ascending client id."""

    activations: Array
    labels: Array
    client_ids: list[int]
    offsets: list[tuple[int, int]]  # (start, length) per client id

    def slice_for(self, position: int) -> slice:
        start, length = self.offsets[position]
        return slice(start, start + length)


def select_participants(
    num_clients: int, rho: float, mode: str, rng: np.random.Generator
) -> list[int]:
    """Pick the round's participant ids (ascending).

    fixed-fraction draws exactly max(1, round(rho * K)) distinct ids;
    bernoulli includes each id independently with probability rho,
    redrawing if nobody was selected.
    """
    if not 0 < rho <= 1:
        raise ValueError("rho must lie in (0, 1]")
    if mode == "fixed-fraction":
        count = max(1, round(rho * num_clients))
        ids = rng.choice(num_clients, size=count, replace=False)
        return sorted(int(i) for i in ids)
    if mode == "bernoulli":
        while True:
            mask = rng.random(num_clients) < rho
            if mask.any():
                return [int(i) for i in np.flatnonzero(mask)]
    raise ValueError(f"unknown participation mode {mode!r}")


def concatenate_activations(batches: Sequence[ActivationBatch]) -> ConcatenatedBatch:
    """Stack per-client blocks in ascending client-id order."""
    if not batches:
        raise ValueError("nothing to concatenate")
    ids = [b.client_id for b in batches]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    widths = {b.activations.shape[1] for b in batches}
    if len(widths) != 1:
        raise ValueError(f"activation widths differ: {sorted(widths)}")
    ordered = sorted(batches, key=lambda b: b.client_id)
    offsets = []
    start = 0
    for b in ordered:
        offsets.append((start, b.activations.shape[0]))
        start += b.activations.shape[0]
    return ConcatenatedBatch(
        activations=np.vstack([b.activations for b in ordered]),
        labels=np.concatenate([b.labels for b in ordered]),
        client_ids=[b.client_id for b in ordered],
        offsets=offsets,
    )


def scatter_gradients(
    concat_grad: Array, offsets: Sequence[tuple[int, int]]
) -> list[Array]:
    """Slice a concatenated-batch gradient back into per-client blocks."""
    total = sum(length for _, length in offsets)
    if concat_grad.shape[0] != total:
        raise ProtocolError(
            f"gradient has {concat_grad.shape[0]} rows, offsets cover {total}"
        )
    return [concat_grad[start : start + length] for start, length in offsets]


def aggregate_layer_stacks(
    stacks: Sequence[Sequence[nn.Layer]], weights: Sequence[float]
) -> list[nn.Layer]:
    """Data-size-weighted average of identically shaped layer stacks."""
    if not stacks:
        raise ValueError("nothing to aggregate")
    if len(stacks) != len(weights):
        raise ValueError("one weight per stack required")
    w = np.asarray(weights, dtype=np.float64)
    if (w <= 0).any():
        raise ValueError("weights must be positive")
    w = w / w.sum()
    first = stacks[0]
    out: list[nn.Layer] = []
    for li, layer in enumerate(first):
        if isinstance(layer, nn.Dense):
            for other in stacks[1:]:
                if (
                    not isinstance(other[li], nn.Dense)
                    or other[li].weights.shape != layer.weights.shape
                ):
                    raise ValueError("layer stacks do not share a structure")
            weights_sum = sum(
                wi * stack[li].weights for wi, stack in zip(w, stacks)
            )
            bias_sum = sum(wi * stack[li].bias for wi, stack in zip(w, stacks))
            out.append(nn.Dense(weights=weights_sum, bias=bias_sum))
        else:
            out.append(nn.Relu())
    return out


@dataclass(frozen=True)
class CommTrace:
    """Shape information needed to price one round's traffic."""

    variant: ProtocolVariant
    local_iters: int
    cut_width: int
    client_params: int
    server_params: int
    batch_sizes: dict[int, int]


@dataclass(frozen=True)
class CommCost:
    uplink_bytes: int
    downlink_bytes: int
    per_client_uplink: dict[int, int]
    per_client_downlink: dict[int, int]


def comm_cost(trace: CommTrace, bytes_per_scalar: int = 8) -> CommCost:
    """Exact integer byte counts for one global round.

    Split variants: each participant uploads its activation block and
    labels every local iteration plus its client-side model once, and
    downloads its gradient block every iteration plus the global
    client-side model once. The model-averaging variant ships the full
    model both ways.
    """
    bps = int(bytes_per_scalar)
    up: dict[int, int] = {}
    down: dict[int, int] = {}
    if trace.variant is ProtocolVariant.FEDAVG:
        full = trace.client_params + trace.server_params
        for k in trace.batch_sizes:
            up[k] = full * bps
            down[k] = full * bps
    else:
        for k, bk in trace.batch_sizes.items():
            activations = bk * trace.cut_width * trace.local_iters
            labels = bk * trace.local_iters
            up[k] = (activations + labels + trace.client_params) * bps
            down[k] = (activations + trace.client_params) * bps
    return CommCost(
        uplink_bytes=sum(up.values()),
        downlink_bytes=sum(down.values()),
        per_client_uplink=up,
        per_client_downlink=down,
    )


@dataclass
class RoundMetrics:
    """Everything recorded about one global round."""

    round_index: int
    variant: str
    train_loss: float
    accuracy: float
    per_class_accuracy: list[float] | None
    balanced_accuracy: float
    grad_norm_server: float
    grad_norm_client: float
    uplink_bytes: int
    downlink_bytes: int


def metrics_csv_header(num_classes: int) -> str:
    cols = ["t", "variant", "loss", "acc", "bal_acc"]
    cols += [f"acc_class_{c}" for c in range(num_classes)]
    cols += ["grad_norm_s", "grad_norm_c", "up_bytes", "down_bytes"]
    return ",".join(cols)


def metrics_csv_row(m: RoundMetrics, num_classes: int) -> str:
    per_class = m.per_class_accuracy
    if per_class is None:
        per_class = [math.nan] * num_classes
    cells = [str(m.round_index), m.variant, repr(m.train_loss), repr(m.accuracy)]
    cells.append(repr(m.balanced_accuracy))
    cells += [repr(v) for v in per_class]
    cells += [repr(m.grad_norm_server), repr(m.grad_norm_client)]
    cells += [str(m.uplink_bytes), str(m.downlink_bytes)]
    return ",".join(cells)


def metrics_json_record(m: RoundMetrics) -> str:
    def clean(x: float):
        return None if isinstance(x, float) and math.isnan(x) else x

    record = {
        "t": m.round_index,
        "variant": m.variant,
        "loss": clean(m.train_loss),
        "acc": clean(m.accuracy),
        "bal_acc": clean(m.balanced_accuracy),
        "acc_per_class": None
        if m.per_class_accuracy is None
        else [clean(v) for v in m.per_class_accuracy],
        "grad_norm_s": clean(m.grad_norm_server),
        "grad_norm_c": clean(m.grad_norm_client),
        "up_bytes": m.uplink_bytes,
        "down_bytes": m.downlink_bytes,
    }
    return json.dumps(record, sort_keys=True)


def evaluate_model(
    layers: Sequence[nn.Layer],
    dataset: Dataset,
    rule: str = "plain",
    prior: LabelDistribution | None = None,
) -> tuple[float, list[float], float]:
    """Overall, per-class, and balanced accuracy on the full dataset."""
    logits, _ = nn.forward(layers, dataset.features)
    if rule == "plain":
        preds = predict(logits)
    elif rule == "balanced":
        if prior is None:
            raise ValueError("balanced evaluation needs a prior")
        preds = predict_balanced(logits, prior)
    else:
        raise ValueError(f"unknown evaluation rule {rule!r}")
    correct = preds == dataset.labels
    per_class = []
    for c in range(dataset.num_classes):
        mask = dataset.labels == c
        per_class.append(float(correct[mask].mean()) if mask.any() else math.nan)
    present = [v for v in per_class if not math.isnan(v)]
    return (
        float(correct.mean()),
        per_class,
        float(np.mean(present)) if present else math.nan,
    )


def _weighted_norm(grad_vectors: list[Array], weights: list[float]) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    combined = sum(wi * g for wi, g in zip(w, grad_vectors))
    return float(np.linalg.norm(combined))


def _client_upstream(
    logits: Array,
    concat: ConcatenatedBatch,
    clients: Sequence[ClientState],
    adjusted: bool,
) -> Array:
    """Per-row logit gradients at 1/B scale, adjusted per client if asked."""
    upstream = np.empty_like(logits)
    total = logits.shape[0]
    for pos, cid in enumerate(concat.client_ids):
        rows = concat.slice_for(pos)
        offsets = log_prior(clients[cid].prior) if adjusted else None
        _, grads = per_sample_ce(logits[rows], concat.labels[rows], offsets)
        upstream[rows] = grads / total
    return upstream


def run_round(
    variant: ProtocolVariant,
    server: ServerState,
    clients: Sequence[ClientState],
    settings: RoundSettings,
    rng: np.random.Generator,
    eval_dataset: Dataset | None = None,
    eval_prior: LabelDistribution | None = None,
) -> RoundMetrics:
    """Execute one global round, mutating server/client state in place.

    eval_dataset = None skips evaluation (accuracy fields become NaN).
    """
    participants = select_participants(
        len(clients), settings.rho, settings.participation, rng
    )
    local_sizes = {k: clients[k].data_size for k in participants}
    available = sum(local_sizes.values())
    if settings.batch_size > available:
        raise ProtocolError(
            f"round {server.round_index}: batch size {settings.batch_size} "
            f"exceeds the participants' {available} samples"
        )
    plan = allocate_minibatch_sizes(local_sizes, settings.batch_size)
    server_loss, client_loss = settings.resolved_losses(variant)

    if variant in (ProtocolVariant.SCALA, ProtocolVariant.CA_SFL):
        stats = _concat_round(
            server, clients, participants, plan, settings, server_loss, client_loss
        )
    elif variant in (ProtocolVariant.LLA_SFL, ProtocolVariant.SPLITFED_V1):
        stats = _splitfed_round(
            server, clients, participants, plan, settings, server_loss, client_loss
        )
    elif variant is ProtocolVariant.FEDAVG:
        stats = _fedavg_round(server, clients, participants, plan, settings, server_loss)
    else:
        raise ValueError(f"unknown variant {variant}")

    trace = CommTrace(
        variant=variant,
        local_iters=settings.local_iters,
        cut_width=nn.stack_output_width(server.client_layers) or 0,
        client_params=nn.count_parameters(server.client_layers),
        server_params=nn.count_parameters(server.server_layers),
        batch_sizes=plan.sizes,
    )
    cost = comm_cost(trace, settings.bytes_per_scalar)

    if eval_dataset is not None:
        accuracy, per_class, balanced = evaluate_model(
            list(server.client_layers) + list(server.server_layers),
            eval_dataset,
            settings.eval_rule,
            eval_prior,
        )
    else:
        accuracy, per_class, balanced = math.nan, None, math.nan

    metrics = RoundMetrics(
        round_index=server.round_index,
        variant=variant.value,
        train_loss=stats["loss"],
        accuracy=accuracy,
        per_class_accuracy=per_class,
        balanced_accuracy=balanced,
        grad_norm_server=stats["grad_norm_s"],
        grad_norm_client=stats["grad_norm_c"],
        uplink_bytes=cost.uplink_bytes,
        downlink_bytes=cost.downlink_bytes,
    )
    server.round_index += 1
    return metrics


def run_scala_round(
    server: ServerState,
    clients: Sequence[ClientState],
    settings: RoundSettings,
    rng: np.random.Generator,
    eval_dataset: Dataset | None = None,
    eval_prior: LabelDistribution | None = None,
) -> RoundMetrics:
    return run_round(
        ProtocolVariant.SCALA, server, clients, settings, rng, eval_dataset, eval_prior
    )


def run_baseline_round(
    variant: ProtocolVariant,
    server: ServerState,
    clients: Sequence[ClientState],
    settings: RoundSettings,
    rng: np.random.Generator,
    eval_dataset: Dataset | None = None,
    eval_prior: LabelDistribution | None = None,
) -> RoundMetrics:
    return run_round(variant, server, clients, settings, rng, eval_dataset, eval_prior)


def _concat_round(
    server: ServerState,
    clients: Sequence[ClientState],
    participants: list[int],
    plan: BatchPlan,
    settings: RoundSettings,
    server_loss: str,
    client_loss: str,
) -> dict:
    replicas = {k: nn.copy_layers(server.client_layers) for k in participants}
    sizes = [clients[k].data_size for k in participants]
    num_classes = clients[0].dataset.num_classes
    loss_total = 0.0
    s_norms: list[float] = []
    c_norms: list[float] = []

    for _ in range(settings.local_iters):
        batches = []
        caches = {}
        for k in participants:
            x, y = sample_minibatch(clients[k].dataset, clients[k].sampler, plan.sizes[k])
            activations, cache = nn.forward(replicas[k], x)
            caches[k] = cache
            batches.append(ActivationBatch(client_id=k, activations=activations, labels=y))
        concat = concatenate_activations(batches)

        logits, server_cache = nn.forward(server.server_layers, concat.activations)
        if server_loss == "adjusted":
            batch_prior = estimate_label_distribution(concat.labels, num_classes)
            loss_out = logit_adjusted_ce(logits, concat.labels, batch_prior)
        else:
            loss_out = cross_entropy(logits, concat.labels)
        server_grads, input_grad = nn.backward(
            server.server_layers, server_cache, loss_out.logit_grad
        )

        # client-bound gradient blocks, still at the pre-step server weights
        if client_loss == server_loss == "plain":
            client_bound = input_grad
        else:
            upstream = _client_upstream(
                logits, concat, clients, adjusted=client_loss == "adjusted"
            )
            _, client_bound = nn.backward(server.server_layers, server_cache, upstream)
        blocks = scatter_gradients(client_bound, concat.offsets)

        server.server_layers = nn.sgd_step(
            server.server_layers, server_grads, settings.eta
        )

        client_grad_vectors = []
        for pos, k in enumerate(concat.client_ids):
            grads, _ = nn.backward(replicas[k], caches[k], blocks[pos])
            replicas[k] = nn.sgd_step(replicas[k], grads, settings.eta)
            client_grad_vectors.append(nn.grad_vector(grads))

        loss_total += loss_out.value
        s_norms.append(float(np.linalg.norm(nn.grad_vector(server_grads))))
        c_norms.append(_weighted_norm(client_grad_vectors, sizes))

    if settings.local_iters:
        server.client_layers = aggregate_layer_stacks(
            [replicas[k] for k in participants], sizes
        )
    for k in participants:
        clients[k].model = replicas[k]

    iters = settings.local_iters
    return {
        "loss": loss_total / iters if iters else math.nan,
        "grad_norm_s": float(np.mean(s_norms)) if s_norms else math.nan,
        "grad_norm_c": float(np.mean(c_norms)) if c_norms else math.nan,
    }


def _splitfed_round(
    server: ServerState,
    clients: Sequence[ClientState],
    participants: list[int],
    plan: BatchPlan,
    settings: RoundSettings,
    server_loss: str,
    client_loss: str,
) -> dict:
    client_replicas = {k: nn.copy_layers(server.client_layers) for k in participants}
    server_replicas = {k: nn.copy_layers(server.server_layers) for k in participants}
    sizes = [clients[k].data_size for k in participants]
    loss_total = 0.0
    s_norms: list[float] = []
    c_norms: list[float] = []

    for _ in range(settings.local_iters):
        iter_loss = 0.0
        server_vectors = []
        client_vectors = []
        for k in participants:
            x, y = sample_minibatch(clients[k].dataset, clients[k].sampler, plan.sizes[k])
            activations, client_cache = nn.forward(client_replicas[k], x)
            logits, server_cache = nn.forward(server_replicas[k], activations)

            if server_loss == "adjusted":
                loss_out = logit_adjusted_ce(logits, y, clients[k].prior)
            else:
                loss_out = cross_entropy(logits, y)
            server_grads, input_grad = nn.backward(
                server_replicas[k], server_cache, loss_out.logit_grad
            )
            if client_loss != server_loss:
                offsets = log_prior(clients[k].prior) if client_loss == "adjusted" else None
                _, grads_rows = per_sample_ce(logits, y, offsets)
                _, input_grad = nn.backward(
                    server_replicas[k], server_cache, grads_rows / y.size
                )
            server_replicas[k] = nn.sgd_step(
                server_replicas[k], server_grads, settings.eta
            )

            grads, _ = nn.backward(client_replicas[k], client_cache, input_grad)
            client_replicas[k] = nn.sgd_step(client_replicas[k], grads, settings.eta)

            iter_loss += plan.sizes[k] * loss_out.value
            server_vectors.append(nn.grad_vector(server_grads))
            client_vectors.append(nn.grad_vector(grads))

        loss_total += iter_loss / plan.total
        s_norms.append(_weighted_norm(server_vectors, sizes))
        c_norms.append(_weighted_norm(client_vectors, sizes))

    if settings.local_iters:
        server.client_layers = aggregate_layer_stacks(
            [client_replicas[k] for k in participants], sizes
        )
        server.server_layers = aggregate_layer_stacks(
            [server_replicas[k] for k in participants], sizes
        )
    for k in participants:
        clients[k].model = client_replicas[k]

    iters = settings.local_iters
    return {
        "loss": loss_total / iters if iters else math.nan,
        "grad_norm_s": float(np.mean(s_norms)) if s_norms else math.nan,
        "grad_norm_c": float(np.mean(c_norms)) if c_norms else math.nan,
    }


def _fedavg_round(
    server: ServerState,
    clients: Sequence[ClientState],
    participants: list[int],
    plan: BatchPlan,
    settings: RoundSettings,
    loss_name: str,
) -> dict:
    cut = len(server.client_layers)
    models = {
        k: nn.copy_layers(server.client_layers) + nn.copy_layers(server.server_layers)
        for k in participants
    }
    sizes = [clients[k].data_size for k in participants]
    loss_total = 0.0
    s_norms: list[float] = []
    c_norms: list[float] = []

    for _ in range(settings.local_iters):
        iter_loss = 0.0
        server_vectors = []
        client_vectors = []
        for k in participants:
            x, y = sample_minibatch(clients[k].dataset, clients[k].sampler, plan.sizes[k])
            logits, cache = nn.forward(models[k], x)
            if loss_name == "adjusted":
                loss_out = logit_adjusted_ce(logits, y, clients[k].prior)
            else:
                loss_out = cross_entropy(logits, y)
            grads, _ = nn.backward(models[k], cache, loss_out.logit_grad)
            models[k] = nn.sgd_step(models[k], grads, settings.eta)

            iter_loss += plan.sizes[k] * loss_out.value
            client_vectors.append(nn.grad_vector(grads[:cut]))
            server_vectors.append(nn.grad_vector(grads[cut:]))

        loss_total += iter_loss / plan.total
        s_norms.append(_weighted_norm(server_vectors, sizes))
        c_norms.append(_weighted_norm(client_vectors, sizes))

    if settings.local_iters:
        merged = aggregate_layer_stacks([models[k] for k in participants], sizes)
        server.client_layers = merged[:cut]
        server.server_layers = merged[cut:]
    for k in participants:
        clients[k].model = models[k][:cut]

    iters = settings.local_iters
    return {
        "loss": loss_total / iters if iters else math.nan,
        "grad_norm_s": float(np.mean(s_norms)) if s_norms else math.nan,
        "grad_norm_c": float(np.mean(c_norms)) if c_norms else math.nan,
    }


def make_client_states(
    dataset: Dataset,
    partition,
    sampler_rngs: Sequence[np.random.Generator],
) -> list[ClientState]:
    """Build per-client protocol state from a partition.

    Each client gets its own sampler stream so participation patterns of
    other clients never perturb its minibatch sequence.
    """
    if len(sampler_rngs) != partition.num_clients:
        raise ValueError("one sampler rng per client required")
    states = []
    for k, indices in enumerate(partition.client_indices):
        prior = estimate_label_distribution(
            dataset.labels[indices], dataset.num_classes
        )
        states.append(
            ClientState(
                client_id=k,
                dataset=dataset,
                indices=indices,
                sampler=MinibatchSampler(indices, sampler_rngs[k]),
                prior=prior,
            )
        )
    return states
