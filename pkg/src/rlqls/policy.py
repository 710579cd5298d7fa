"""Selection policy: MLP with a logit head over variable indices and a value
head, ordered without-replacement sampling, and hand-written gradients.

Actions are built by m successive draws from a masked softmax over the
logits (already-picked indices masked to -inf and the remainder
renormalized), which gives an exact, differentiable log-probability for the
ordered index list. Everything is float64 so finite-difference checks can be
tight. Forward passes, sampling, and log-probabilities are pure with respect
to a parameter snapshot; only the learner mutates parameters, and snapshots
are never mutated after publication.
"""

import json
from dataclasses import dataclass

import numpy as np

from .env import encode  # state encoder shared with the environment
from .errors import ContractViolation, TrainingError

__all__ = [
    "NetParams",
    "PolicyOutput",
    "OptimizerConfig",
    "OptimizerState",
    "encode",
    "feature_dim",
    "init_params",
    "forward",
    "forward_batch",
    "sample_action",
    "greedy_action",
    "log_prob_of",
    "backward",
    "optimizer_step",
    "init_optimizer",
    "flatten_params",
    "unflatten_params",
    "save_checkpoint",
    "load_checkpoint",
]


def feature_dim(n: int) -> int:
    """Encoder output length for problem size n: graph block plus two configs."""
    return n * (n - 1) // 2 + 3 * n


@dataclass(frozen=True)
class NetParams:
    """Weights of the shared trunk plus the two heads; treated as immutable.

    feature_map names a fixed, parameter-free transform applied to the input
    before the trunk: "identity" feeds the encoded state straight through;
    "flip-gain" appends the per-index single-flip energy gains computed from
    the graph block and each stored configuration, which hands the network
    the local-field structure it would otherwise have to rediscover.
    """

    trunk_w: tuple
    trunk_b: tuple
    policy_w: np.ndarray  # (hidden[-1], n_actions)
    policy_b: np.ndarray  # (n_actions,)
    value_w: np.ndarray  # (hidden[-1],)
    value_b: float
    version: int = 0
    feature_map: str = "identity"

    @property
    def layer_sizes(self) -> tuple:
        return tuple(w.shape[0] for w in self.trunk_w) + (self.trunk_w[-1].shape[1],)

    @property
    def input_dim(self) -> int:
        """Length of the encoded state vector the net accepts (pre-transform)."""
        width = self.trunk_w[0].shape[0]
        if self.feature_map == "flip-gain":
            return width - 2 * self.n_actions
        return width

    @property
    def n_actions(self) -> int:
        return self.policy_w.shape[1]


@dataclass(frozen=True)
class PolicyOutput:
    logits: np.ndarray
    value: float


def init_params(
    input_dim: int,
    n_actions: int,
    hidden: tuple,
    rng: np.random.Generator,
    version: int = 0,
    feature_map: str = "identity",
) -> NetParams:
    """Glorot-uniform weights, zero biases.

    input_dim is the encoded-state length; with the "flip-gain" feature map
    the first trunk layer is widened by 2 * n_actions to take the appended
    gain blocks.
    """
    if feature_map not in ("identity", "flip-gain"):
        raise ContractViolation(f"unknown feature map {feature_map!r}")
    if feature_map == "flip-gain" and input_dim != feature_dim(n_actions):
        raise ContractViolation(
            "flip-gain expects the standard encoded state: input_dim "
            f"{input_dim} != feature_dim({n_actions}) = {feature_dim(n_actions)}"
        )

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    width = input_dim + (2 * n_actions if feature_map == "flip-gain" else 0)
    sizes = (width,) + tuple(hidden)
    trunk_w = tuple(glorot(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
    trunk_b = tuple(np.zeros(b) for b in sizes[1:])
    return NetParams(
        trunk_w=trunk_w,
        trunk_b=trunk_b,
        policy_w=glorot(sizes[-1], n_actions),
        policy_b=np.zeros(n_actions),
        value_w=glorot(sizes[-1], 1)[:, 0],
        value_b=0.0,
        version=version,
        feature_map=feature_map,
    )


# pair-index tables for the flip-gain transform, keyed by n
_pair_index_cache: dict = {}


def _pair_indices(n: int):
    cached = _pair_index_cache.get(n)
    if cached is None:
        cached = np.triu_indices(n, 1)
        _pair_index_cache[n] = cached
    return cached


def _flip_gain_blocks(x: np.ndarray, n: int) -> np.ndarray:
    """Per-index single-flip energy gains for both stored configurations.

    The encoded state is [couplings || fields || current || previous]; the
    gain of flipping spin i under configuration s is -2 s_i (sum_j J_ij s_j
    + h_i). Scaled by 1/(2 sqrt(n)) to keep tanh inputs in range.
    """
    batch = x.shape[0]
    n_pairs = n * (n - 1) // 2
    iu, ju = _pair_indices(n)
    pairs = x[:, :n_pairs]
    fields = x[:, n_pairs : n_pairs + n]
    sym = np.zeros((batch, n, n))
    sym[:, iu, ju] = pairs
    sym[:, ju, iu] = pairs
    scale = -2.0 / (2.0 * np.sqrt(n))
    blocks = []
    for offset in (n_pairs + n, n_pairs + 2 * n):
        config = x[:, offset : offset + n]
        local = np.einsum("bij,bj->bi", sym, config) + fields
        blocks.append(scale * config * local)
    return np.concatenate([x] + blocks, axis=1)


def _apply_feature_map(params: NetParams, x: np.ndarray) -> np.ndarray:
    if params.feature_map == "flip-gain":
        return _flip_gain_blocks(x, params.n_actions)
    return x


def _forward_cache(params: NetParams, x: np.ndarray):
    """Batched forward pass keeping the trunk activations for backprop."""
    a = _apply_feature_map(params, x)
    activations = [a]
    for w, b in zip(params.trunk_w, params.trunk_b):
        a = np.tanh(a @ w + b)
        activations.append(a)
    logits = a @ params.policy_w + params.policy_b
    values = a @ params.value_w + params.value_b
    return logits, values, activations


def forward_batch(params: NetParams, features: np.ndarray):
    """(B, D) features -> ((B, N) logits, (B,) values)."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.input_dim:
        raise ContractViolation(
            f"features must be (B, {params.input_dim}), got {features.shape}"
        )
    logits, values, _ = _forward_cache(params, features)
    return logits, values


def forward(params: NetParams, features: np.ndarray) -> PolicyOutput:
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (params.input_dim,):
        raise ContractViolation(
            f"features must be ({params.input_dim},), got {features.shape}"
        )
    logits, values, _ = _forward_cache(params, features[None, :])
    return PolicyOutput(logits=logits[0], value=float(values[0]))


def _masked_log_softmax_term(logits: np.ndarray, avail: np.ndarray, q: int) -> float:
    z = np.where(avail, logits, -np.inf)
    zmax = z.max()
    lse = zmax + np.log(np.exp(z - zmax).sum())
    return float(logits[q] - lse)


def log_prob_of(output: PolicyOutput, action) -> float:
    """Exact log-probability of an ordered index list under masked sampling."""
    logits = output.logits
    n = logits.size
    avail = np.ones(n, dtype=bool)
    total = 0.0
    for q in action:
        q = int(q)
        if q < 0 or q >= n:
            raise ContractViolation(f"action index {q} out of range for N={n}")
        if not avail[q]:
            raise ContractViolation(f"duplicate index {q} in action")
        total += _masked_log_softmax_term(logits, avail, q)
        avail[q] = False
    return total


def sample_action(
    output: PolicyOutput, m: int, rng: np.random.Generator
) -> tuple[tuple, float]:
    """Draw m distinct indices by repeated masked-softmax sampling."""
    logits = output.logits
    n = logits.size
    if m > n:
        raise ContractViolation(f"m={m} exceeds N={n}")
    avail = np.ones(n, dtype=bool)
    chosen = []
    for _ in range(m):
        z = np.where(avail, logits, -np.inf)
        zmax = z.max()
        p = np.exp(z - zmax)
        p /= p.sum()
        q = int(np.searchsorted(np.cumsum(p), rng.random(), side="right"))
        if q >= n or not avail[q]:  # cumulative-sum roundoff at the top end
            q = int(np.flatnonzero(avail).max())
        chosen.append(q)
        avail[q] = False
    action = tuple(chosen)
    return action, log_prob_of(output, action)


def greedy_action(output: PolicyOutput, m: int) -> tuple[tuple, float]:
    """Deterministic variant: per-draw argmax with masking."""
    logits = output.logits
    n = logits.size
    if m > n:
        raise ContractViolation(f"m={m} exceeds N={n}")
    avail = np.ones(n, dtype=bool)
    chosen = []
    for _ in range(m):
        q = int(np.argmax(np.where(avail, logits, -np.inf)))
        chosen.append(q)
        avail[q] = False
    action = tuple(chosen)
    return action, log_prob_of(output, action)


def logpi_logits_grad(logits: np.ndarray, action) -> np.ndarray:
    """d log pi(action | logits) / d logits for the ordered masked factorization."""
    n = logits.size
    avail = np.ones(n, dtype=bool)
    grad = np.zeros(n)
    for q in action:
        q = int(q)
        z = np.where(avail, logits, -np.inf)
        zmax = z.max()
        p = np.exp(z - zmax)
        p /= p.sum()
        grad -= p
        grad[q] += 1.0
        avail[q] = False
    return grad


# --- flat parameter vectors ---------------------------------------------------

def _param_arrays(params: NetParams) -> list:
    arrays = []
    for w, b in zip(params.trunk_w, params.trunk_b):
        arrays.extend([w, b])
    arrays.extend([params.policy_w, params.policy_b, params.value_w])
    arrays.append(np.array([params.value_b]))
    return arrays


def num_params(params: NetParams) -> int:
    return sum(a.size for a in _param_arrays(params))


def flatten_params(params: NetParams) -> np.ndarray:
    return np.concatenate([a.ravel() for a in _param_arrays(params)])


def unflatten_params(flat: np.ndarray, template: NetParams) -> NetParams:
    pieces = []
    offset = 0
    for a in _param_arrays(template):
        pieces.append(flat[offset : offset + a.size].reshape(a.shape).copy())
        offset += a.size
    if offset != flat.size:
        raise ContractViolation(
            f"flat vector has {flat.size} entries, template needs {offset}"
        )
    k = len(template.trunk_w)
    return NetParams(
        trunk_w=tuple(pieces[2 * i] for i in range(k)),
        trunk_b=tuple(pieces[2 * i + 1] for i in range(k)),
        policy_w=pieces[2 * k],
        policy_b=pieces[2 * k + 1],
        value_w=pieces[2 * k + 2],
        value_b=float(pieces[2 * k + 3][0]),
        version=template.version,
        feature_map=template.feature_map,
    )


def _backward_from_heads(
    params: NetParams, activations: list, dlogits: np.ndarray, dvalues: np.ndarray
) -> np.ndarray:
    """Flat gradient given upstream gradients at both heads (batched rows)."""
    a_last = activations[-1]
    g_policy_w = a_last.T @ dlogits
    g_policy_b = dlogits.sum(axis=0)
    g_value_w = a_last.T @ dvalues
    g_value_b = dvalues.sum()

    da = dlogits @ params.policy_w.T + dvalues[:, None] * params.value_w[None, :]
    g_trunk = []
    for layer in range(len(params.trunk_w) - 1, -1, -1):
        dz = da * (1.0 - activations[layer + 1] ** 2)
        g_trunk.append((activations[layer].T @ dz, dz.sum(axis=0)))
        if layer > 0:
            da = dz @ params.trunk_w[layer].T
    g_trunk.reverse()

    chunks = []
    for gw, gb in g_trunk:
        chunks.extend([gw.ravel(), gb])
    chunks.extend([g_policy_w.ravel(), g_policy_b, g_value_w, np.array([g_value_b])])
    return np.concatenate(chunks)


def backward(
    params: NetParams, features: np.ndarray, action, c_pg: float, c_v: float
) -> np.ndarray:
    """Flat gradient of  c_pg * log pi(action|s) + c_v * V(s)  w.r.t. parameters."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape != (params.input_dim,):
        raise ContractViolation(
            f"features must be ({params.input_dim},), got {features.shape}"
        )
    logits, _, activations = _forward_cache(params, features[None, :])
    dlogits = (c_pg * logpi_logits_grad(logits[0], action))[None, :]
    dvalues = np.array([float(c_v)])
    return _backward_from_heads(params, activations, dlogits, dvalues)


# --- optimizer ----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerConfig:
    """RMSProp-style update; defaults follow the actor-learner lineage."""

    learning_rate: float = 5e-4
    decay: float = 0.99
    eps: float = 1e-5


@dataclass
class OptimizerState:
    accumulator: np.ndarray


def init_optimizer(params: NetParams) -> OptimizerState:
    return OptimizerState(accumulator=np.zeros(num_params(params)))


def optimizer_step(
    params: NetParams,
    gradient: np.ndarray,
    state: OptimizerState,
    hyper: OptimizerConfig,
) -> tuple[NetParams, OptimizerState]:
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != state.accumulator.shape:
        raise ContractViolation(
            f"gradient has shape {gradient.shape}, expected {state.accumulator.shape}"
        )
    if not np.all(np.isfinite(gradient)):
        bad = int(np.sum(~np.isfinite(gradient)))
        raise TrainingError(
            f"non-finite gradient: {bad} of {gradient.size} entries "
            f"(max |finite| = {np.nanmax(np.abs(gradient[np.isfinite(gradient)])) if bad < gradient.size else 'n/a'})"
        )
    acc = hyper.decay * state.accumulator + (1.0 - hyper.decay) * gradient**2
    flat = flatten_params(params) - hyper.learning_rate * gradient / np.sqrt(
        acc + hyper.eps
    )
    return unflatten_params(flat, params), OptimizerState(accumulator=acc)


# --- checkpoints ----------------------------------------------------------------

def save_checkpoint(path, params: NetParams, n: int, m: int) -> None:
    """JSON header (arch/n/m/version) plus the flat parameter vector.

    Floats are serialized with round-trip precision, so load() restores the
    exact values.
    """
    payload = {
        "arch": [int(s) for s in params.layer_sizes],
        "activation": "tanh",
        "feature_map": params.feature_map,
        "n": int(n),
        "m": int(m),
        "version": int(params.version),
        "params": [float(v) for v in flatten_params(params)],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[NetParams, dict]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    arch = [int(s) for s in data["arch"]]
    n = int(data["n"])
    feature_map = data.get("feature_map", "identity")
    input_dim = arch[0]
    if feature_map == "flip-gain":
        input_dim -= 2 * n  # arch records the widened first trunk layer
    template = init_params(
        input_dim,
        n,
        tuple(arch[1:]),
        np.random.default_rng(0),
        version=int(data["version"]),
        feature_map=feature_map,
    )
    flat = np.asarray(data["params"], dtype=np.float64)
    params = unflatten_params(flat, template)
    meta = {"n": n, "m": int(data["m"]), "arch": arch, "version": int(data["version"])}
    return params, meta
