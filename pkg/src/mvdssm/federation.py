"""Federated multi-view training and prediction.

One round: sample clients; on each client every view computes item- and
user-tower gradients on one local batch; the item gradients are merged across
views with :func:`~mvdssm.privacy.local_secure_aggregate`; the client uploads
its merged item gradient (and, unless user towers stay local, its per-view
user gradients) weighted by ``m_k / m``; the server sums the uploads, in the
clear or through :mod:`mvdssm.secagg`, steps its optimizer and broadcasts the
new weights. With ``aggregate_user=False`` every client keeps and locally
updates its own user towers. With a single view this is plain federated DSSM.
"""

from __future__ import annotations

import contextvars
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import secagg
from .data import FederatedData
from .dssm import TrainingBatch, batch_loss_and_grads, posterior
from .nn import Gradients, Tower, init_tower, make_optimizer, sgd_step
from .privacy import DpParams, account_epsilon, average, local_secure_aggregate, noisy_probability

logger = logging.getLogger(__name__)

# set while a view agent runs; lets tests check that view data never leaks across views
active_view: contextvars.ContextVar[int | None] = contextvars.ContextVar("active_view", default=None)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class FederationConfig:
    rounds: int = 100
    clients_per_round: int = 100
    views: tuple[int, ...] = (1, 2)
    client_lr: float = 0.2
    server_optimizer: str = "adam"
    server_lr: float = 0.001
    batch_size: int = 20
    gamma: float = 1.0
    n_neg: int = 4
    aggregate_user: bool = True
    local_steps: int = 1
    dp: DpParams | None = field(default_factory=DpParams)
    predict_dp: DpParams | None = None
    secure_agg: bool = False
    secagg_threshold: int | None = None
    dropout: float = 0.0
    hidden: tuple[int, ...] = (64, 32, 16)
    activation: str = "tanh"
    seed: int = 0
    eval_every: int = 10
    central_optimizer: str = "adam"
    central_lr: float = 0.001
    central_epochs: int = 3

    def problems(self) -> list[str]:
        out = []
        if self.rounds < 0:
            out.append(f"rounds must be >= 0, got {self.rounds}")
        if self.clients_per_round < 1:
            out.append("clients_per_round must be >= 1")
        if not self.views:
            out.append("at least one view is required")
        if len(set(self.views)) != len(self.views):
            out.append("views must be distinct")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if self.n_neg < 1:
            out.append("n_neg must be >= 1")
        if self.gamma <= 0:
            out.append("gamma must be positive")
        if self.local_steps < 1:
            out.append("local_steps must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            out.append("dropout must be in [0, 1)")
        if self.dp is not None and self.dp.batch_views is not None and self.dp.batch_views > len(self.views):
            out.append(f"|B|={self.dp.batch_views} exceeds the number of views N={len(self.views)}")
        for name in ("server_optimizer", "central_optimizer"):
            if getattr(self, name) not in ("sgd", "adam"):
                out.append(f"{name} must be 'sgd' or 'adam'")
        if self.eval_every < 1:
            out.append("eval_every must be >= 1")
        return out

    def validate(self) -> "FederationConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


def _tag_seed(*parts) -> int:
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


def sample_negatives(
    users: np.ndarray,
    n_neg: int,
    pool: np.ndarray,
    seen: Callable[[int], np.ndarray],
    rng: np.random.Generator,
) -> np.ndarray:
    """``n_neg`` items per row drawn uniformly from ``pool`` minus that user's positives."""
    out = rng.choice(pool, size=(len(users), n_neg))
    for r, u in enumerate(users):
        banned = seen(int(u))  # sorted
        if len(banned) >= len(pool):
            raise ValueError(f"user {u} has interacted with every candidate item")
        bad = _contains(banned, out[r])
        while bad.any():
            out[r, bad] = rng.choice(pool, size=int(bad.sum()))
            bad = _contains(banned, out[r])
    return out


def _contains(sorted_ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_ids, values)
    return sorted_ids[np.minimum(pos, len(sorted_ids) - 1)] == values if len(sorted_ids) else np.zeros(len(values), bool)


def draw_batch(
    pair_users: np.ndarray,
    pair_items: np.ndarray,
    data: FederatedData,
    view: int,
    batch_size: int,
    n_neg: int,
    rng: np.random.Generator,
    features: Callable[[np.ndarray], np.ndarray] | None = None,
) -> TrainingBatch:
    """Sample up to ``batch_size`` positive pairs and their negatives."""
    take = min(batch_size, len(pair_items))
    idx = np.sort(rng.choice(len(pair_items), size=take, replace=False))
    users, pos = pair_users[idx], pair_items[idx]
    neg = sample_negatives(users, n_neg, data.item_pool, lambda u: data.positives[u], rng)
    item_ids = np.concatenate([pos[:, None], neg], axis=1).ravel()
    items = data.catalog.features[item_ids - 1]
    feats = features(users) if features is not None else data.views[view].features[users - 1]
    return TrainingBatch(np.asarray(feats), items, n_neg, view)


class ViewAgent:
    """One isolated view on a client: its own feature row and user tower."""

    def __init__(self, view: int, features: np.ndarray, tower: Tower):
        self.view = view
        self._features = features
        self.tower = tower

    def _rows(self, users: np.ndarray) -> np.ndarray:
        return np.repeat(self._features[None, :], len(users), axis=0)

    def gradients(
        self,
        item_tower: Tower,
        client: "Client",
        config: FederationConfig,
        rng: np.random.Generator,
    ) -> tuple[float, Gradients, Gradients, int]:
        token = active_view.set(self.view)
        try:
            batch = draw_batch(
                client.pair_users, client.pair_items, client.data, self.view,
                config.batch_size, config.n_neg, rng, features=self._rows,
            )
            loss, ug, ig = batch_loss_and_grads(self.tower, item_tower, batch, config.gamma)
            return loss, ug, ig, batch.size
        finally:
            active_view.reset(token)


@dataclass
class ClientUpdate:
    client: int
    m: int
    item: np.ndarray  # flat
    users: dict[int, np.ndarray] | None  # view -> flat, None when user towers stay local
    loss: float


class Client:
    def __init__(self, cid: int, data: FederatedData, agents: dict[int, ViewAgent]):
        self.id = cid
        self.data = data
        self.agents = agents
        self.pair_items = data.positives[cid]
        self.pair_users = np.full(len(self.pair_items), cid, dtype=np.int64)

    @property
    def m(self) -> int:
        return len(self.pair_items)


def client_round(
    client: Client,
    item_tower: Tower,
    config: FederationConfig,
    round_no: int,
) -> ClientUpdate:
    """Local gradients for one round.

    With ``aggregate_user`` the view agents' towers must already hold the
    current global user weights; otherwise they are the client's own and are
    updated here with local SGD.
    """
    views = sorted(client.agents)
    local_item = item_tower
    item_acc: np.ndarray | None = None
    user_acc: dict[int, np.ndarray] = {}
    loss_total, pairs = 0.0, 0
    for step in range(config.local_steps):
        item_grads, user_grads = [], {}
        for v in views:
            rng = _rng(config.seed, round_no, client.id, v, step)
            loss, ug, ig, n = client.agents[v].gradients(local_item, client, config, rng)
            loss_total += loss
            pairs += n
            item_grads.append(ig.flatten())
            user_grads[v] = ug
        if config.dp is None:
            g_item = average(item_grads)
        else:
            g_item = local_secure_aggregate(
                item_grads, config.dp, _rng(config.seed, round_no, client.id, 0xD9, step)
            )
        item_acc = g_item if item_acc is None else item_acc + g_item
        for v in views:
            flat = user_grads[v].flatten()
            user_acc[v] = flat if v not in user_acc else user_acc[v] + flat
        last_step = step == config.local_steps - 1
        if not config.aggregate_user or not last_step:
            for v in views:
                agent = client.agents[v]
                agent.tower = sgd_step(agent.tower, user_grads[v], config.client_lr)
        if not last_step:
            local_item = sgd_step(local_item, Gradients.unflatten(g_item, local_item), config.client_lr)
    return ClientUpdate(
        client.id,
        client.m,
        item_acc,
        user_acc if config.aggregate_user else None,
        loss_total / max(pairs, 1),
    )


class Server:
    def __init__(self, item_tower: Tower, user_towers: dict[int, Tower], config: FederationConfig):
        self.item_tower = item_tower
        self.user_towers = user_towers
        self.round = 0
        self._item_opt = make_optimizer(config.server_optimizer, config.server_lr)
        self._user_opt = {v: make_optimizer(config.server_optimizer, config.server_lr) for v in user_towers}
        for opt, tower in [(self._item_opt, item_tower)] + [
            (self._user_opt[v], t) for v, t in user_towers.items()
        ]:
            if hasattr(opt, "init"):
                opt.init(tower)

    def apply(self, item_grad: np.ndarray, user_grads: dict[int, np.ndarray] | None) -> None:
        self.item_tower = self._item_opt.step(self.item_tower, Gradients.unflatten(item_grad, self.item_tower))
        if user_grads is not None:
            for v, g in user_grads.items():
                tower = self.user_towers[v]
                self.user_towers[v] = self._user_opt[v].step(tower, Gradients.unflatten(g, tower))
        self.round += 1


def _aggregate(
    parts: dict[int, np.ndarray],
    weights: dict[int, float],
    config: FederationConfig,
    bus: secagg.SimBus,
    round_no: int,
    tag: str,
) -> np.ndarray:
    """Sample-count weighted sum over clients, ascending client id, renormalized over survivors."""
    ids = sorted(parts)
    if config.secure_agg:
        scaled = {cid: weights[cid] * parts[cid] for cid in ids}
        total, survivors = secagg.secure_sum(
            scaled,
            threshold=config.secagg_threshold,
            seed=_tag_seed(config.seed, round_no, tag),
            bus=bus,
            round_no=round_no,
            tag=tag,
        )
    else:
        survivors, total = [], None
        for cid in ids:
            msg = secagg.Message(cid, secagg.SERVER, round_no, secagg.Kind.PLAIN, memoryview(parts[cid]).cast("B"))
            if not bus.send(msg, secagg.Phase.MASKED_INPUT, tag):
                continue
            survivors.append(cid)
            contrib = weights[cid] * parts[cid]
            total = contrib if total is None else total + contrib
        bus.deliver(secagg.SERVER)
        if total is None:
            raise RuntimeError(f"round {round_no}: every client dropped")
    if len(survivors) != len(ids):
        total = total / sum(weights[c] for c in survivors)
    return total


def server_round(
    server: Server,
    updates: list[ClientUpdate],
    config: FederationConfig,
    round_no: int,
    bus: secagg.SimBus | None = None,
) -> tuple[np.ndarray, dict[int, np.ndarray] | None]:
    """Aggregate client uploads, step the server optimizer; returns the aggregated gradients."""
    if not updates:
        raise ValueError("no participating clients")
    bus = bus or secagg.SimBus()
    m_total = sum(u.m for u in updates)
    weights = {u.client: u.m / m_total for u in updates}
    g_item = _aggregate({u.client: u.item for u in updates}, weights, config, bus, round_no, "item")
    g_users = None
    if config.aggregate_user:
        g_users = {}
        for v in sorted(server.user_towers):
            g_users[v] = _aggregate(
                {u.client: u.users[v] for u in updates}, weights, config, bus, round_no, f"user:{v}"
            )
    server.apply(g_item, g_users)
    return g_item, g_users


@dataclass
class Model:
    """A trained snapshot: global item tower plus user towers (global or per client)."""

    item_tower: Tower
    user_towers: dict[int, Tower]
    local_user_towers: dict[int, dict[int, Tower]] | None = None
    gamma: float = 1.0

    def towers_for(self, user: int) -> dict[int, Tower]:
        if self.local_user_towers is not None and user in self.local_user_towers:
            return self.local_user_towers[user]
        return self.user_towers


def _unit_rows(y: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(n == 0):
        from .dssm import ZeroNormError

        raise ZeroNormError("zero semantic vector at prediction time")
    return y / n


def item_vectors(model: Model, data: FederatedData, item_ids: np.ndarray) -> np.ndarray:
    from .nn import forward

    y, _ = forward(model.item_tower, data.catalog.features[np.asarray(item_ids) - 1])
    return _unit_rows(y)


def user_posteriors(
    model: Model,
    data: FederatedData,
    users: np.ndarray,
    unit_items: np.ndarray,
    predict_dp: DpParams | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Mean over views of the per-view softmax over the candidate items, shape (users, items)."""
    from .nn import forward

    views = sorted(model.user_towers)
    total = np.zeros((len(users), unit_items.shape[0]))
    for v in views:
        feats = data.views[v].features[np.asarray(users) - 1]
        if model.local_user_towers is None:
            y, _ = forward(model.user_towers[v], feats)
        else:
            y = np.vstack([forward(model.towers_for(int(u))[v], feats[r])[0] for r, u in enumerate(users)])
        p = posterior(_unit_rows(y) @ unit_items.T, model.gamma)
        if predict_dp is not None and predict_dp.sigma > 0:
            p = noisy_probability(p, predict_dp, rng if rng is not None else np.random.default_rng())
        total += p
    return total / len(views)


def rank_items(scores: np.ndarray, item_ids: np.ndarray, k: int, exclude=None) -> np.ndarray:
    """Top-``k`` item ids by score, ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    item_ids = np.asarray(item_ids)
    keep = np.ones(len(item_ids), dtype=bool)
    if exclude is not None and len(exclude):
        keep &= ~np.isin(item_ids, exclude)
    s, ids = scores[keep], item_ids[keep]
    order = np.lexsort((ids, -s))
    return ids[order[:k]]


def predict_topk(
    model: Model,
    data: FederatedData,
    user: int,
    k: int = 10,
    candidates: np.ndarray | None = None,
    exclude: np.ndarray | None = None,
    predict_dp: DpParams | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    cand = np.arange(1, data.catalog.n_items + 1) if candidates is None else np.asarray(candidates)
    if len(cand) == 0:
        raise ValueError("empty item catalog")
    unit_items = item_vectors(model, data, cand)
    p = user_posteriors(model, data, np.array([user]), unit_items, predict_dp, rng)[0]
    return rank_items(p, cand, k, exclude)


@dataclass
class RoundLog:
    round: int
    loss: float
    epsilon: float | None = None
    metrics: dict[str, float] | None = None


@dataclass
class TrainResult:
    model: Model
    history: list[RoundLog]
    bus: secagg.SimBus | None = None


def init_model(config: FederationConfig, data: FederatedData) -> Model:
    item = init_tower([data.catalog.dim, *config.hidden], _rng(config.seed, 0x17E4), config.activation)
    users = {
        v: init_tower([data.views[v].dim, *config.hidden], _rng(config.seed, 0x05E2, v), config.activation)
        for v in config.views
    }
    return Model(item, users, None, config.gamma)


def _privacy(config: FederationConfig, rounds: int) -> float | None:
    if config.dp is None or rounds == 0:
        return None
    n = len(config.views)
    q = config.dp.views_for(n) / n
    return account_epsilon(config.dp.sigma, config.dp.delta, rounds, q).epsilon


Evaluator = Callable[[Model], dict[str, float]]


def run_training(
    config: FederationConfig,
    data: FederatedData,
    evaluate: Evaluator | None = None,
    bus: secagg.SimBus | None = None,
) -> TrainResult:
    config.validate()
    data = data.restrict(config.views)
    model = init_model(config, data)
    clients_all = data.users
    if config.clients_per_round > len(clients_all):
        raise ConfigError([f"clients_per_round={config.clients_per_round} exceeds {len(clients_all)} clients"])
    server = Server(model.item_tower, dict(model.user_towers), config)
    local: dict[int, dict[int, Tower]] = {}
    history: list[RoundLog] = []
    bus = bus or secagg.SimBus(record=False)

    for k in range(config.rounds):
        chosen = np.sort(_rng(config.seed, k, 0xC1).choice(clients_all, config.clients_per_round, replace=False))
        if config.dropout > 0:
            drop_rng = _rng(config.seed, k, 0xD0)
            bus.drops = {int(c): secagg.Phase.MASKED_INPUT for c in chosen if drop_rng.random() < config.dropout}
        updates = []
        for cid in chosen.tolist():
            if config.aggregate_user:
                towers = server.user_towers
            else:
                towers = local.setdefault(cid, dict(model.user_towers))
            agents = {v: ViewAgent(v, data.user_features(v, cid), towers[v]) for v in config.views}
            client = Client(cid, data, agents)
            updates.append(client_round(client, server.item_tower, config, k))
            if not config.aggregate_user:
                local[cid] = {v: a.tower for v, a in agents.items()}
        server_round(server, updates, config, k, bus)
        bus.drops = {}
        entry = RoundLog(k + 1, float(np.mean([u.loss for u in updates])), _privacy(config, k + 1))
        history.append(entry)
        if evaluate is not None and ((k + 1) % config.eval_every == 0 or k + 1 == config.rounds):
            entry.metrics = evaluate(_snapshot(server, local, config))
            logger.info("round %d loss %.4f %s", k + 1, entry.loss, entry.metrics)

    result_model = _snapshot(server, local, config)
    if evaluate is not None and config.rounds == 0:
        history.append(RoundLog(0, float("nan"), None, evaluate(result_model)))
    return TrainResult(result_model, history, bus)


def _snapshot(server: Server, local: dict[int, dict[int, Tower]], config: FederationConfig) -> Model:
    return Model(
        server.item_tower,
        dict(server.user_towers),
        None if config.aggregate_user else {c: dict(t) for c, t in local.items()},
        config.gamma,
    )


def run_centralized(
    config: FederationConfig,
    data: FederatedData,
    view: int,
    steps: int | None = None,
    stream: int = 0,
    evaluate: Evaluator | None = None,
    optimizer: str | None = None,
    lr: float | None = None,
) -> TrainResult:
    """Pooled-data training of one user tower and the item tower.

    Step ``s`` draws its batch from ``_rng(seed, s, stream, view, 0)``; passing a
    client id as ``stream`` replays exactly the batches that client would draw
    in a one-view federated run.
    """
    config = replace(config, views=(view,)).validate()
    data = data.restrict((view,))
    model = init_model(config, data)
    pair_users = np.concatenate([np.full(len(data.positives[u]), u) for u in data.users])
    pair_items = np.concatenate([data.positives[u] for u in data.users])
    n_pairs = len(pair_items)
    if steps is None:
        steps = config.central_epochs * int(np.ceil(n_pairs / config.batch_size))
    kind = optimizer or config.central_optimizer
    rate = lr if lr is not None else config.central_lr
    item_opt, user_opt = make_optimizer(kind, rate), make_optimizer(kind, rate)
    for opt, tower in ((item_opt, model.item_tower), (user_opt, model.user_towers[view])):
        if hasattr(opt, "init"):
            opt.init(tower)
    item_tower, user_tower = model.item_tower, model.user_towers[view]
    history: list[RoundLog] = []
    per_epoch = max(1, int(np.ceil(n_pairs / config.batch_size)))
    eval_stride = max(1, steps // max(1, config.rounds // config.eval_every)) if config.rounds else per_epoch
    losses: list[float] = []
    for s in range(steps):
        batch = draw_batch(pair_users, pair_items, data, view, config.batch_size, config.n_neg,
                           _rng(config.seed, s, stream, view, 0))
        loss, ug, ig = batch_loss_and_grads(user_tower, item_tower, batch, config.gamma)
        losses.append(loss / batch.size)
        item_tower = item_opt.step(item_tower, ig)
        user_tower = user_opt.step(user_tower, ug)
        done = s + 1
        if done % per_epoch == 0 or done == steps or (evaluate is not None and done % eval_stride == 0):
            entry = RoundLog(done, float(np.mean(losses)))
            losses = []
            if evaluate is not None and (done % eval_stride == 0 or done == steps):
                entry.metrics = evaluate(Model(item_tower, {view: user_tower}, None, config.gamma))
            history.append(entry)
    return TrainResult(Model(item_tower, {view: user_tower}, None, config.gamma), history)
