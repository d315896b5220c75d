"""Client/server protocol engine: strategies, local training, aggregation.

The round loop is generic over three phases (instruction tuning, reward
learning, alignment): a phase provides a per-client work function, one or
more parameter exchange channels (which partition to upload and which groups
to aggregate), and an evaluation function. Uploads are metered through the
channel cost model and every round is reported with the fixed CSV schema

    round,strategy,client_id,loss,accuracy,bits,delay_s,energy_J,
    r_helpful,r_harmless,r_total

with one row per client plus a GLOBAL row. Aggregation iterates clients in
ascending id so results are bitwise independent of upload arrival order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import channel as ch
from . import model as M
from . import tasks as T
from .errors import ConfigError, PhaseOrderError, ProtocolError
from .optim import SGD

log = logging.getLogger(__name__)

CSV_HEADER = ("round,strategy,client_id,loss,accuracy,bits,delay_s,energy_J,"
              "r_helpful,r_harmless,r_total")


# ---------------------------------------------------------------------------
# strategies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Strategy:
    """Which parameter groups a client structure has, uploads, and shares."""
    name: str
    upload_groups: tuple[str, ...]
    aggregate_groups: tuple[str, ...]
    reward_mode: str          # dual | single_helpful
    use_adapters: bool
    use_lora: bool

    def __post_init__(self):
        if not set(self.aggregate_groups) <= set(self.upload_groups):
            raise ConfigError("aggregate_groups must be a subset of upload_groups")
        if self.reward_mode not in ("dual", "single_helpful"):
            raise ConfigError(f"unknown reward mode {self.reward_mode!r}")

    @property
    def uniform_rank_required(self) -> bool:
        """LoRA can only be averaged if every client uses the same rank."""
        return "lora" in self.aggregate_groups


STRATEGIES: dict[str, Strategy] = {
    "PWFF": Strategy("PWFF", ("adapter",), ("adapter",), "dual", True, True),
    "VanillaFL": Strategy("VanillaFL", ("adapter", "lora"), ("adapter", "lora"), "dual", True, True),
    "FedAda": Strategy("FedAda", ("adapter",), ("adapter",), "dual", True, False),
    "FedLoRA": Strategy("FedLoRA", ("lora",), ("lora",), "dual", False, True),
    "SFL": Strategy("SFL", ("adapter",), ("adapter",), "single_helpful", True, True),
    "PFL_Full": Strategy("PFL_Full", ("adapter", "lora"), ("adapter", "lora"), "dual", True, True),
    "Shepherd": Strategy("Shepherd", ("lora",), ("lora",), "single_helpful", False, True),
}


# ---------------------------------------------------------------------------
# client / server state
# ---------------------------------------------------------------------------


@dataclass
class ClientState:
    id: int
    shard: list[T.InstructionTask]
    lora_rank: int
    weights: tuple[float, float]                       # (w_helpful, w_harmless)
    model: M.TransformerLM
    reward_models: dict[str, M.ScoringModel] | None = None
    critic_models: dict[str, M.ScoringModel] | None = None
    optimizer: object | None = None
    preferences: dict[str, list[T.PreferencePair]] = field(default_factory=dict)
    ref_model: M.TransformerLM | None = None           # frozen post-instruct policy

    def __post_init__(self):
        wh, wx = self.weights
        if wh < 0 or wx < 0 or abs(wh + wx - 1.0) > 1e-9:
            raise ConfigError(f"preference weights {self.weights} must be >= 0 and sum to 1")


@dataclass
class Server:
    channel_cfg: ch.ChannelConfig
    scheme: str = "data_size"     # data_size | uniform
    fading_seed: int = 0
    include_downlink: bool = False

    def __post_init__(self):
        if self.scheme not in ("data_size", "uniform"):
            raise ConfigError(f"unknown aggregation scheme {self.scheme!r}")


def assign_lora_ranks(strategy: Strategy, n_clients: int, pool: tuple[int, ...],
                      uniform_rank: int, seed: int) -> list[int]:
    """Per-client ranks: drawn from the pool, or uniform when LoRA is averaged."""
    if not strategy.use_lora:
        return [0] * n_clients
    if strategy.uniform_rank_required:
        return [uniform_rank] * n_clients
    rng = np.random.default_rng(seed)
    return [int(pool[i % len(pool)]) for i in rng.permutation(n_clients)]


def build_clients(strategy: Strategy, model_cfg: M.ModelConfig,
                  shards: list[list[T.InstructionTask]], weights: list[tuple[float, float]],
                  ranks: list[int], base_seed: int, peft_seed: int) -> list[ClientState]:
    """Clients sharing one base-model init, with strategy-specific PEFT structure."""
    clients = []
    for cid, (shard, w, rank) in enumerate(zip(shards, weights, ranks)):
        cfg = M.ModelConfig(
            vocab_size=model_cfg.vocab_size, d_model=model_cfg.d_model,
            n_layers=model_cfg.n_layers, n_heads=model_cfg.n_heads,
            max_seq_len=model_cfg.max_seq_len,
            adapter_bottleneck=model_cfg.adapter_bottleneck,
            lora_rank=rank, lora_alpha=model_cfg.lora_alpha,
            d_ff=model_cfg.d_ff, emb_std=model_cfg.emb_std,
        )
        m = M.TransformerLM(cfg, seed=base_seed)
        m.insert_peft(seed=peft_seed, adapters=strategy.use_adapters)
        clients.append(ClientState(cid, shard, rank, w, m))
    return clients


# ---------------------------------------------------------------------------
# uploads, aggregation, broadcast
# ---------------------------------------------------------------------------


@dataclass
class Upload:
    client_id: int
    vector: np.ndarray
    manifest: tuple[M.TensorSpec, ...]
    weight: float

    @property
    def bits(self) -> int:
        return ch.BITS_PER_PARAM * int(self.vector.size)


def select_upload(partition: M.ParamPartition, strategy: Strategy) -> tuple[np.ndarray, tuple[M.TensorSpec, ...]]:
    """Flat float32 vector of the strategy's upload groups, plus its manifest."""
    return select_upload_groups(partition, strategy.upload_groups, strategy.name)


def aggregate(uploads: list[Upload], scheme: str = "data_size") -> np.ndarray:
    """Weighted elementwise mean in fixed client-id order (float64 accumulate)."""
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    if scheme not in ("data_size", "uniform"):
        raise ConfigError(f"unknown aggregation scheme {scheme!r}")
    ref = uploads[0].manifest
    for u in uploads:
        if u.manifest != ref:
            raise ProtocolError(f"upload manifest mismatch for client {u.client_id}")
        if u.weight <= 0:
            raise ProtocolError(f"non-positive aggregation weight for client {u.client_id}")
    ordered = sorted(uploads, key=lambda u: u.client_id)
    weights = np.asarray([1.0 if scheme == "uniform" else u.weight for u in ordered],
                         dtype=np.float64)
    weights /= weights.sum()
    acc = np.zeros(ordered[0].vector.size, dtype=np.float64)
    for u, w in zip(ordered, weights):
        acc += w * u.vector.astype(np.float64)
    return acc.astype(np.float32)


def _subvector(vector: np.ndarray, manifest: tuple[M.TensorSpec, ...], groups) -> np.ndarray:
    gset = set(groups)
    parts = []
    off = 0
    for spec in manifest:
        size = int(np.prod(spec.shape))
        if spec.group in gset:
            parts.append(vector[off:off + size])
        off += size
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


def broadcast(global_vector: np.ndarray, manifest: tuple[M.TensorSpec, ...],
              clients: list[ClientState], aggregate_groups: tuple[str, ...],
              get_partition: Callable[[ClientState], M.ParamPartition]) -> int:
    """Write aggregated groups into every client; personal groups untouched.

    Returns the per-client downlink payload in bits.
    """
    sub = _subvector(global_vector, manifest, aggregate_groups)
    agg_manifest = tuple(s for s in manifest if s.group in set(aggregate_groups))
    for c in clients:
        part = get_partition(c)
        if tuple(part.manifest_for(aggregate_groups)) != agg_manifest:
            raise ProtocolError(f"client {c.id} manifest does not match broadcast manifest")
        part.unflatten(aggregate_groups, sub)
    return ch.BITS_PER_PARAM * int(sub.size)


# ---------------------------------------------------------------------------
# local supervised training
# ---------------------------------------------------------------------------


def instruction_loss(model: M.TransformerLM, tasks: list[T.InstructionTask]) -> ad.Tensor:
    """Mean cross-entropy over response tokens (target + end marker)."""
    seqs, rows, ids = [], [], []
    off = 0
    for t in tasks:
        full = list(t.prompt) + list(t.target) + [T.EOS]
        seqs.append(full)
        for j in range(len(t.target) + 1):
            rows.append(off + len(t.prompt) - 1 + j)
            ids.append(full[len(t.prompt) + j])
        off += len(full)
    logits, _, _ = model.forward_batch(seqs)
    picked = ad.take_rows(logits, np.asarray(rows, dtype=np.intp))
    return ad.mean(ad.cross_entropy_rows(picked, np.asarray(ids, dtype=np.intp)))


def local_sgd(client: ClientState, epochs: int, lr: float, batch_size: int,
              rng: np.random.Generator, lora_lr_scale: float = 1.0) -> float:
    """Minibatch SGD on the client's shard; only PEFT groups move.

    LoRA parameters step at ``lr * lora_lr_scale`` (personal groups drift
    slower than the shared adapters by default). Returns the mean training
    loss, or NaN for an empty shard (the client contributes nothing this
    round).
    """
    if not client.shard:
        log.warning("client %d has an empty shard; skipping local update", client.id)
        return math.nan
    if not client.model.peft_inserted:
        raise PhaseOrderError(f"client {client.id} has no PEFT modules inserted")
    trainable = client.model.partition.trainable()
    groups = client.model.groups
    opt_adapter = SGD({n: p for n, p in trainable.items() if groups[n] == "adapter"}, lr=lr)
    opt_lora = SGD({n: p for n, p in trainable.items() if groups[n] == "lora"},
                   lr=lr * lora_lr_scale)
    losses = []
    n = len(client.shard)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = [client.shard[i] for i in order[start:start + batch_size]]
            loss = instruction_loss(client.model, batch)
            opt_adapter.zero_grad()
            opt_lora.zero_grad()
            ad.backward(loss)
            opt_adapter.step()
            opt_lora.step()
            losses.append(loss.item())
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def greedy_eval(model: M.TransformerLM, tasks: list[T.InstructionTask],
                policy: T.VocabPolicy, max_new: int = 8) -> tuple[float, float, float]:
    """(mean helpful oracle, mean harmless oracle, forbidden-token rate) under greedy decoding."""
    if not tasks:
        return math.nan, math.nan, math.nan
    gens = M.generate_batch(model, [list(t.prompt) for t in tasks], max_new,
                            M.Sampler("greedy"), np.random.default_rng(0), stop_token=T.EOS)
    helpful = [T.oracle_helpful(t, g.response) for t, g in zip(tasks, gens)]
    harmless = [T.oracle_harmless(g.response, policy) for g in gens]
    total_tokens = sum(len(g.response) for g in gens)
    bad = sum(1 for g in gens for tok in g.response if tok in policy.forbidden)
    rate = bad / total_tokens if total_tokens else 0.0
    return float(np.mean(helpful)), float(np.mean(harmless)), float(rate)


def sampled_eval(model: M.TransformerLM, tasks: list[T.InstructionTask],
                 policy: T.VocabPolicy, sampler: M.Sampler, rng: np.random.Generator,
                 max_new: int = 8) -> tuple[float, float, float]:
    """Same metrics as ``greedy_eval`` but under the stochastic policy.

    Forbidden-token emission is a property of the sampling distribution, so
    alignment outcomes on harmlessness are measured here rather than under
    argmax decoding.
    """
    if not tasks:
        return math.nan, math.nan, math.nan
    gens = M.generate_batch(model, [list(t.prompt) for t in tasks], max_new,
                            sampler, rng, stop_token=T.EOS)
    helpful = [T.oracle_helpful(t, g.response) for t, g in zip(tasks, gens)]
    harmless = [T.oracle_harmless(g.response, policy) for g in gens]
    total_tokens = sum(len(g.response) for g in gens)
    bad = sum(1 for g in gens for tok in g.response if tok in policy.forbidden)
    rate = bad / total_tokens if total_tokens else 0.0
    return float(np.mean(helpful)), float(np.mean(harmless)), float(rate)


def global_accuracy(clients: list[ClientState], eval_shards: list[list[T.InstructionTask]],
                    policy: T.VocabPolicy, max_new: int = 8) -> float:
    """Mean helpful oracle with each personalized client model scored on a
    held-out shard drawn from its own local distribution."""
    scores = []
    for c in clients:
        subset = eval_shards[c.id]
        if not subset:
            continue
        gens = M.generate_batch(c.model, [list(t.prompt) for t in subset], max_new,
                                M.Sampler("greedy"), np.random.default_rng(0), stop_token=T.EOS)
        scores.extend(T.oracle_helpful(t, g.response) for t, g in zip(subset, gens))
    return float(np.mean(scores)) if scores else math.nan


# ---------------------------------------------------------------------------
# round reports
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class RoundRow:
    round: int
    strategy: str
    client_id: str
    loss: float = math.nan
    accuracy: float = math.nan
    bits: int = 0
    delay_s: float = 0.0
    energy_j: float = 0.0
    r_helpful: float = math.nan
    r_harmless: float = math.nan
    r_total: float = math.nan

    def csv(self) -> str:
        return ",".join([str(self.round), self.strategy, self.client_id,
                         _fmt(self.loss), _fmt(self.accuracy), str(self.bits),
                         _fmt(self.delay_s), _fmt(self.energy_j), _fmt(self.r_helpful),
                         _fmt(self.r_harmless), _fmt(self.r_total)])


@dataclass
class RoundReport:
    round_index: int
    strategy: str
    rows: list[RoundRow]

    @property
    def global_row(self) -> RoundRow:
        return next(r for r in self.rows if r.client_id == "GLOBAL")

    @property
    def client_rows(self) -> list[RoundRow]:
        return [r for r in self.rows if r.client_id != "GLOBAL"]


def write_rounds_csv(reports: list[RoundReport], path, phase: str | None = None) -> None:
    header = CSV_HEADER if phase is None else "phase," + CSV_HEADER
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header + "\n")
        for rep in reports:
            for row in rep.rows:
                f.write((row.csv() if phase is None else f"{phase},{row.csv()}") + "\n")


# ---------------------------------------------------------------------------
# convergence and the generic round loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceCriterion:
    """Stop after max_rounds, or when the best metric has improved by less
    than min_rel_improve (relative) over the last ``patience`` rounds."""
    max_rounds: int
    patience: int = 0
    min_rel_improve: float = 0.0

    def should_stop(self, history: list[float]) -> bool:
        if len(history) >= self.max_rounds:
            return True
        if self.patience and len(history) > self.patience:
            prev_best = max(history[:-self.patience])
            recent_best = max(history[-self.patience:])
            improve = (recent_best - prev_best) / max(abs(prev_best), 1e-12)
            return improve < self.min_rel_improve
        return False


@dataclass
class ExchangeChannel:
    """One federated parameter exchange (e.g. the policy PEFT groups)."""
    name: str
    get_partition: Callable[[ClientState], M.ParamPartition]
    upload_groups: tuple[str, ...]
    aggregate_groups: tuple[str, ...]
    weight_fn: Callable[[ClientState], float] | None = None  # None -> shard size


@dataclass
class ClientRoundStats:
    loss: float = math.nan
    r_helpful: float = math.nan
    r_harmless: float = math.nan
    r_total: float = math.nan
    skipped: bool = False


def run_phase(clients: list[ClientState], server: Server, strategy: Strategy,
              phase: str, stop: ConvergenceCriterion, *,
              local_work: Callable[[ClientState, int], ClientRoundStats],
              channels: list[ExchangeChannel],
              evaluate: Callable[[list[ClientState], int], dict[str, float]]) -> list[RoundReport]:
    """Synchronous federated rounds with full participation.

    Each round: local work per client (ascending id), upload selection per
    exchange channel, weighted aggregation, broadcast, channel metering, and
    evaluation. Stops per the convergence criterion.
    """
    if phase not in ("instruct", "reward", "align"):
        raise ConfigError(f"unknown phase {phase!r}")
    fading = ch.FadingStream(server.fading_seed)
    reports: list[RoundReport] = []
    history: list[float] = []
    r = 0
    while not stop.should_stop(history):
        gain = fading.next_gain() if server.channel_cfg.fading == "rayleigh" else 1.0
        rate = ch.shannon_rate(server.channel_cfg, gain)

        stats: dict[int, ClientRoundStats] = {}
        for c in sorted(clients, key=lambda c: c.id):
            stats[c.id] = local_work(c, r)

        client_bits = {c.id: 0 for c in clients}
        downlink_bits = 0
        for chan in channels:
            uploads = []
            for c in sorted(clients, key=lambda c: c.id):
                if stats[c.id].skipped:
                    continue
                vec, manifest = select_upload_groups(chan.get_partition(c), chan.upload_groups,
                                                     strategy.name)
                if server.scheme == "data_size":
                    weight = float(chan.weight_fn(c)) if chan.weight_fn else float(max(len(c.shard), 1))
                else:
                    weight = 1.0
                uploads.append(Upload(c.id, vec, manifest, weight))
                client_bits[c.id] += ch.BITS_PER_PARAM * int(vec.size)
            if not uploads:
                continue
            global_vec = aggregate(uploads, server.scheme)
            downlink_bits += broadcast(global_vec, uploads[0].manifest, clients,
                                       chan.aggregate_groups, chan.get_partition)

        metrics = evaluate(clients, r)
        total_bits = sum(client_bits.values())
        if server.include_downlink:
            total_bits += downlink_bits * len(clients)
        delay = ch.comm_delay(total_bits, rate)
        energy = ch.tx_energy(delay, server.channel_cfg)

        rows = []
        for c in sorted(clients, key=lambda c: c.id):
            st = stats[c.id]
            bits = client_bits[c.id]
            d = ch.comm_delay(bits, rate)
            rows.append(RoundRow(r, strategy.name, str(c.id), loss=st.loss, bits=bits,
                                 delay_s=d, energy_j=ch.tx_energy(d, server.channel_cfg),
                                 r_helpful=st.r_helpful, r_harmless=st.r_harmless,
                                 r_total=st.r_total))
        r_h = metrics.get("r_helpful", _nanmean([s.r_helpful for s in stats.values()]))
        r_x = metrics.get("r_harmless", _nanmean([s.r_harmless for s in stats.values()]))
        r_t = metrics.get("r_total", _nanmean([s.r_total for s in stats.values()]))
        rows.append(RoundRow(r, strategy.name, "GLOBAL",
                             loss=_nanmean([s.loss for s in stats.values()]),
                             accuracy=metrics.get("accuracy", math.nan),
                             bits=total_bits, delay_s=delay, energy_j=energy,
                             r_helpful=r_h, r_harmless=r_x, r_total=r_t))
        reports.append(RoundReport(r, strategy.name, rows))
        history.append(metrics["stop_metric"])
        r += 1
    return reports


def select_upload_groups(partition: M.ParamPartition, groups: tuple[str, ...],
                         strategy_name: str) -> tuple[np.ndarray, tuple[M.TensorSpec, ...]]:
    for g in groups:
        if partition.count(g) == 0:
            raise ConfigError(f"strategy {strategy_name} uploads group {g!r} "
                              f"but the model has no such parameters")
    return partition.flatten(groups), tuple(partition.manifest_for(groups))


def _nanmean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# instruction tuning phase
# ---------------------------------------------------------------------------


def run_instruct_phase(clients: list[ClientState], server: Server, strategy: Strategy,
                       stop: ConvergenceCriterion, *, lr: float, epochs: int,
                       batch_size: int, eval_shards: list[list[T.InstructionTask]],
                       policy: T.VocabPolicy, seed: int, max_new: int = 8,
                       lora_lr_scale: float = 1.0) -> list[RoundReport]:
    """Federated supervised instruction tuning (uploads per the strategy)."""

    def work(client: ClientState, round_index: int) -> ClientRoundStats:
        if not client.shard:
            return ClientRoundStats(skipped=True)
        rng = np.random.default_rng(derive_seed(seed, "instruct", round_index, client.id))
        loss = local_sgd(client, epochs, lr, batch_size, rng, lora_lr_scale)
        return ClientRoundStats(loss=loss)

    def evaluate(cs: list[ClientState], round_index: int) -> dict[str, float]:
        acc = global_accuracy(cs, eval_shards, policy, max_new)
        return {"accuracy": acc, "stop_metric": acc}

    channels = [ExchangeChannel("policy", lambda c: c.model.partition,
                                strategy.upload_groups, strategy.aggregate_groups)]
    return run_phase(clients, server, strategy, "instruct", stop,
                     local_work=work, channels=channels, evaluate=evaluate)


def derive_seed(master: int, *tags) -> int:
    """Stable seed derivation from a master seed and hashable tags."""
    import zlib
    parts = [int(master) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, int):
            parts.append(t & 0xFFFFFFFF)
        else:
            parts.append(zlib.crc32(str(t).encode("utf-8")))
    return int(np.random.SeedSequence(parts).generate_state(1)[0])
