"""Encoder-decoder graph attention over typed neighbourhoods, plus policy and value headers.

All functions take ``Tensor`` (or ndarray) inputs with arbitrary leading batch
axes and a :class:`~encgat_ecr.autodiff.ParameterSet` holding weights stored
as ``[in, out]`` matrices.  Parameter names:

``temporal/{port,vessel}/{wq,wk,wv}``
    lookback attention, raw features -> d_model
``block{b}/{pp,pv}/edge/{w,b}``
    merges a neighbour embedding with its edge features
``block{b}/{pp,pv}/{enc,dec}/...``
    attention projections, feed-forward, layer norms
``block{b}/{pp,pv}/null``
    aggregate used when a vertex has no neighbour of that type
``block{b}/out/{w,b}``
    projects the per-type concatenation back to d_model
``actor/...``, ``critic_local/...``, ``critic_global/...``
    two-layer residual headers
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ParameterSet, Tensor

EDGE_TYPES = ("pp", "pv")
EDGE_TYPE_NAMES = {"pp": "port-port", "pv": "port-vessel"}
N_ACTIONS = 22
PORT_FEATURES = 18
VESSEL_FEATURES = 7
EDGE_FEATURES = 1


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    d_model: int = 32
    d_ff: int = 64
    heads: int = 1
    blocks: int = 2
    n_lookback: int = 20
    port_features: int = PORT_FEATURES
    vessel_features: int = VESSEL_FEATURES
    edge_features: int = EDGE_FEATURES
    n_actions: int = N_ACTIONS
    decoder_only: bool = False
    separate_actors: bool = False
    n_agents: int = 0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigurationError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.blocks < 1 or self.n_lookback < 1:
            raise ConfigurationError("blocks and n_lookback must be >= 1")
        if self.separate_actors and self.n_agents < 1:
            raise ConfigurationError("separate_actors needs n_agents >= 1")


# ---------------------------------------------------------------------------
# initialisation


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _linear(params: ParameterSet, rng, name: str, n_in: int, n_out: int) -> None:
    params[f"{name}/w"] = _uniform(rng, n_in, (n_in, n_out))
    params[f"{name}/b"] = _uniform(rng, n_in, (n_out,))


def _layer_norm_params(params: ParameterSet, name: str, n: int) -> None:
    params[f"{name}/g"] = np.ones(n)
    params[f"{name}/b"] = np.zeros(n)


def _attention_block(params: ParameterSet, rng, name: str, cfg: NetConfig) -> None:
    d = cfg.d_model
    for p in ("wq", "wk", "wv"):
        params[f"{name}/{p}"] = _uniform(rng, d, (d, d))
    _layer_norm_params(params, f"{name}/ln1", d)
    _linear(params, rng, f"{name}/ff1", d, cfg.d_ff)
    _linear(params, rng, f"{name}/ff2", cfg.d_ff, d)
    _layer_norm_params(params, f"{name}/ln2", d)


def init_encgat(cfg: NetConfig, rng: np.random.Generator, params: ParameterSet | None = None) -> ParameterSet:
    params = ParameterSet() if params is None else params
    d = cfg.d_model
    for vtype, f in (("port", cfg.port_features), ("vessel", cfg.vessel_features)):
        for p in ("wq", "wk", "wv"):
            params[f"temporal/{vtype}/{p}"] = _uniform(rng, f, (f, d))
    for b in range(cfg.blocks):
        for et in EDGE_TYPES:
            base = f"block{b}/{et}"
            _linear(params, rng, f"{base}/edge", d + cfg.edge_features, d)
            _attention_block(params, rng, f"{base}/enc", cfg)
            _attention_block(params, rng, f"{base}/dec", cfg)
            params[f"{base}/null"] = _uniform(rng, d, (d,))
        _linear(params, rng, f"block{b}/out", d * len(EDGE_TYPES), d)
    return params


def actor_prefixes(cfg: NetConfig) -> list[str]:
    if cfg.separate_actors:
        return [f"actor/{i}" for i in range(cfg.n_agents)]
    return ["actor"]


def init_actor(cfg: NetConfig, rng: np.random.Generator, params: ParameterSet) -> ParameterSet:
    w = 2 * cfg.d_model
    for prefix in actor_prefixes(cfg):
        _linear(params, rng, f"{prefix}/fc1", w, w)
        _linear(params, rng, f"{prefix}/fc2", w, cfg.n_actions)
    return params


def init_critic(cfg: NetConfig, rng: np.random.Generator, params: ParameterSet, kind: str) -> ParameterSet:
    if kind not in ("local", "global"):
        raise ConfigurationError(f"unknown critic kind {kind!r}")
    d = cfg.d_model
    _linear(params, rng, f"critic_{kind}/fc1", d, d)
    _linear(params, rng, f"critic_{kind}/fc2", d, 1)
    return params


def init_params(cfg: NetConfig, rng: np.random.Generator, global_critic: bool = True) -> ParameterSet:
    params = init_encgat(cfg, rng)
    init_actor(cfg, rng, params)
    init_critic(cfg, rng, params, "local")
    if global_critic:
        init_critic(cfg, rng, params, "global")
    return params


# ---------------------------------------------------------------------------
# attention pieces


def attention(q, k, v, key_mask: np.ndarray | None = None, heads: int = 1) -> Tensor:
    """Scaled dot-product attention over the second-to-last axis of ``k``/``v``.

    ``key_mask`` has shape [..., n] (True = admissible key) and broadcasts over
    query rows.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    d = q.shape[-1]
    mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[..., None, :]
    if heads == 1:
        scores = ad.scale(ad.row_dots(q, k), 1.0 / math.sqrt(d))
        return ad.attend(ad.softmax(scores, mask), v)
    dk = d // heads

    def split(t):
        t = ad.reshape(t, t.shape[:-1] + (heads, dk))
        return ad.swapaxes(t, -2, -3)

    qh, kh, vh = split(q), split(k), split(v)
    if mask is not None:
        mask = mask[..., None, :, :]
    scores = ad.scale(ad.row_dots(qh, kh), 1.0 / math.sqrt(dk))
    out = ad.attend(ad.softmax(scores, mask), vh)
    out = ad.swapaxes(out, -2, -3)
    return ad.reshape(out, out.shape[:-2] + (d,))


def _ffn(x, params: ParameterSet, name: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{name}/ff1/w"]), params[f"{name}/ff1/b"]))
    return ad.add(ad.matmul(h, params[f"{name}/ff2/w"]), params[f"{name}/ff2/b"])


def _ln(x, params: ParameterSet, name: str) -> Tensor:
    return ad.layer_norm(x, params[f"{name}/g"], params[f"{name}/b"])


def temporal_attention(history, params: ParameterSet, vertex_type: str, heads: int = 1) -> Tensor:
    """Attend from the newest lookback row over the whole window.

    ``history`` is [..., n, f] ordered oldest to newest; returns [..., d_model].
    """
    history = ad.as_tensor(history)
    p = f"temporal/{vertex_type}"
    current = history[..., -1:, :]
    q = ad.matmul(current, params[f"{p}/wq"])
    k = ad.matmul(history, params[f"{p}/wk"])
    v = ad.matmul(history, params[f"{p}/wv"])
    out = attention(q, k, v, heads=heads)
    return ad.reshape(out, out.shape[:-2] + (out.shape[-1],))


def encode_neighbors(x, params: ParameterSet, name: str, mask: np.ndarray | None = None, heads: int = 1) -> Tensor:
    """Self-attention encoder over neighbour rows ``x`` [..., N, d].

    a = Att(x Wq, x Wk, x Wv); k = LN(a + x); z = FFN(k); o = LN(k + z).
    Padded rows (mask False) are excluded as keys.
    """
    x = ad.as_tensor(x)
    if x.shape[-2] == 0:
        return x
    a = attention(
        ad.matmul(x, params[f"{name}/wq"]),
        ad.matmul(x, params[f"{name}/wk"]),
        ad.matmul(x, params[f"{name}/wv"]),
        mask,
        heads,
    )
    k = _ln(ad.add(a, x), params, f"{name}/ln1")
    z = _ffn(k, params, name)
    return _ln(ad.add(k, z), params, f"{name}/ln2")


def decode_aggregate(
    x_center, encoded, params: ParameterSet, name: str, null_name: str,
    mask: np.ndarray | None = None, heads: int = 1,
) -> Tensor:
    """Aggregate encoded neighbours [..., N, d] using the centre [..., d] as query.

    The centre is expanded to one query row per neighbour; all rows of the
    attention output are therefore equal, and the residual LN(e + o) is taken
    row-wise against the encoded neighbours.  The expanded axis is squeezed by
    an order-independent masked mean.  Centres without neighbours receive the
    learned null embedding.
    """
    x_center, o = ad.as_tensor(x_center), ad.as_tensor(encoded)
    null = params[null_name]
    batch = x_center.shape[:-1]
    n = o.shape[-2]
    if n == 0:
        return ad.add(ad.mul(np.zeros(batch + (1,)), x_center), null)
    if mask is None:
        mask = np.ones(o.shape[:-1], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    xq = ad.reshape(x_center, batch + (1, x_center.shape[-1]))
    e = attention(
        ad.matmul(xq, params[f"{name}/wq"]),
        ad.matmul(o, params[f"{name}/wk"]),
        ad.matmul(o, params[f"{name}/wv"]),
        mask,
        heads,
    )
    f = _ln(ad.add(e, o), params, f"{name}/ln1")
    c = _ffn(f, params, name)
    h = _ln(ad.add(f, c), params, f"{name}/ln2")
    pooled = ad.mean(h, axis=-2, mask=mask, exact=True)
    has_any = mask.any(axis=-1)[..., None]
    if has_any.all():
        return pooled
    return ad.select(has_any, pooled, null)


# ---------------------------------------------------------------------------
# whole-graph forward


@dataclass(frozen=True)
class GraphStructure:
    """Static neighbour tables of a topology, padded to the max degree.

    ``pp_index[i]`` lists port neighbours of port ``i``; ``pv_index[i]`` lists
    vessel neighbours.  Padded slots hold index 0 and mask False.
    ``pp_edge`` holds static port-port edge features [P, Dpp, e].
    """

    n_ports: int
    n_vessels: int
    pp_index: np.ndarray
    pp_mask: np.ndarray
    pp_edge: np.ndarray
    pv_index: np.ndarray
    pv_mask: np.ndarray

    def neighbors(self, port: int, edge_type: str) -> list[int]:
        idx = self.pp_index if edge_type == "pp" else self.pv_index
        m = self.pp_mask if edge_type == "pp" else self.pv_mask
        return [int(j) for j, ok in zip(idx[port], m[port]) if ok]


@dataclass
class GraphBatch:
    """Features of T graph snapshots sharing one structure.

    port_windows [T, P, n, fp], vessel_windows [T, V, n, fv],
    pv_edge [T, P, Dpv, e] (dynamic vessel edge features).
    """

    structure: GraphStructure
    port_windows: np.ndarray
    vessel_windows: np.ndarray
    pv_edge: np.ndarray

    def __len__(self) -> int:
        return self.port_windows.shape[0]

    def slice(self, sl: slice | np.ndarray) -> "GraphBatch":
        return GraphBatch(self.structure, self.port_windows[sl], self.vessel_windows[sl], self.pv_edge[sl])


@dataclass
class EncGatOutput:
    """Port embeddings h [T, P, d], vessel embeddings [T, V, d], per-block, per-type parts."""

    ports: Tensor
    vessels: Tensor
    components: list[dict[str, Tensor]] = field(default_factory=list)


def _neighbor_rows(src: Tensor, index: np.ndarray, edge: np.ndarray, params: ParameterSet, name: str) -> Tensor:
    nb = ad.gather(src, index, axis=1)  # [T, P, D, d]
    edge_t = Tensor(np.broadcast_to(edge, nb.shape[:-1] + (edge.shape[-1],)))
    rows = ad.concat([nb, edge_t], axis=-1)
    return ad.add(ad.matmul(rows, params[f"{name}/w"]), params[f"{name}/b"])


def encgat_forward_batch(batch: GraphBatch, params: ParameterSet, cfg: NetConfig) -> EncGatOutput:
    """Temporal attention per vertex, then ``cfg.blocks`` encoder-decoder blocks.

    Each block aggregates both edge types, concatenates the per-type results,
    projects back to d_model and adds the block input (residual).
    """
    s = batch.structure
    xp = temporal_attention(batch.port_windows, params, "port", cfg.heads)
    xv = temporal_attention(batch.vessel_windows, params, "vessel", cfg.heads)
    T = len(batch)
    components = []
    for b in range(cfg.blocks):
        parts = {}
        for et in EDGE_TYPES:
            base = f"block{b}/{et}"
            if et == "pp":
                src, index, mask, edge = xp, s.pp_index, s.pp_mask, s.pp_edge[None]
            else:
                src, index, mask, edge = xv, s.pv_index, s.pv_mask, batch.pv_edge
            if index.shape[1] == 0:
                parts[et] = ad.add(ad.mul(np.zeros((T, s.n_ports, 1)), xp), params[f"{base}/null"])
                continue
            bmask = np.broadcast_to(mask, (T,) + mask.shape)
            rows = _neighbor_rows(src, index, edge, params, f"{base}/edge")
            enc = rows if cfg.decoder_only else encode_neighbors(rows, params, f"{base}/enc", bmask, cfg.heads)
            parts[et] = decode_aggregate(xp, enc, params, f"{base}/dec", f"{base}/null", bmask, cfg.heads)
        cat = ad.concat([parts[et] for et in EDGE_TYPES], axis=-1)
        proj = ad.add(ad.matmul(cat, params[f"block{b}/out/w"]), params[f"block{b}/out/b"])
        xp = ad.add(xp, proj)
        components.append(parts)
    return EncGatOutput(xp, xv, components)


def encgat_forward(obs, params: ParameterSet, cfg: NetConfig) -> EncGatOutput:
    """Embed the centre of a single :class:`HeteroObservation`.

    Returns an output whose ``ports`` is the centre embedding [1, d] and
    ``vessels`` the current vessel embedding [1, d].
    """
    unknown = set(obs.neighbors) - set(EDGE_TYPES)
    if unknown:
        raise ConfigurationError(f"unknown edge types {sorted(unknown)}")
    out = encgat_forward_batch(obs.batch, params, cfg)
    c = obs.center_index
    comps = [{et: part[0, c:c + 1] for et, part in blk.items()} for blk in out.components]
    vessel = out.vessels[0, obs.vessel_index:obs.vessel_index + 1] if obs.vessel_index is not None else None
    return EncGatOutput(out.ports[0, c:c + 1], vessel, comps)


def decoder_only_forward(obs, params: ParameterSet, cfg: NetConfig) -> EncGatOutput:
    """Single-decoder ablation: neighbours go straight to the decoder attention."""
    from dataclasses import replace

    return encgat_forward(obs, params, replace(cfg, decoder_only=True))


# ---------------------------------------------------------------------------
# headers


def _residual_mlp(x, params: ParameterSet, prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}/fc1/w"]), params[f"{prefix}/fc1/b"]))
    r = ad.add(x, h)
    return ad.add(ad.matmul(r, params[f"{prefix}/fc2/w"]), params[f"{prefix}/fc2/b"])


def actor_logits(port_emb, vessel_emb, params: ParameterSet, prefix: str = "actor") -> Tensor:
    """Logits [..., 22] from the concatenated port and current-vessel embeddings."""
    x = ad.concat([ad.as_tensor(port_emb), ad.as_tensor(vessel_emb)], axis=-1)
    return _residual_mlp(x, params, prefix)


def _check_mask(mask, n_actions: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n_actions:
        raise ContractError(f"action mask has width {mask.shape[-1]}, expected {n_actions}")
    if not np.all(mask.any(axis=-1)):
        raise ContractError("action mask marks every action infeasible")
    return mask


def actor_header(port_emb, vessel_emb, action_mask, params: ParameterSet, prefix: str = "actor") -> Tensor:
    """Action probabilities; masked actions get exactly 0."""
    logits = actor_logits(port_emb, vessel_emb, params, prefix)
    return ad.softmax(logits, _check_mask(action_mask, logits.shape[-1]))


def actor_log_probs(port_emb, vessel_emb, action_mask, params: ParameterSet, prefix: str = "actor") -> Tensor:
    logits = actor_logits(port_emb, vessel_emb, params, prefix)
    return ad.log_softmax(logits, _check_mask(action_mask, logits.shape[-1]))


def critic_header(embedding, params: ParameterSet, kind: str) -> Tensor:
    """State value; ``embedding`` [..., d] -> [...]."""
    if kind not in ("local", "global"):
        raise ConfigurationError(f"unknown critic kind {kind!r}")
    v = _residual_mlp(embedding, params, f"critic_{kind}")
    return ad.reshape(v, v.shape[:-1])


def global_critic_input(port_embeddings) -> Tensor:
    """Mean over the port axis of [..., P, d]."""
    return ad.mean(port_embeddings, axis=-2)
