"""History-conditioned step anomaly detector.

The model predicts the embedding of the next step from the task query and the
interaction history, then scores the realized step by how badly it was
predicted and how far the prediction sits from a learnable prototype of
normal behavior:

    score(t) = alpha * ||x_hat_t - x_t||^2 + beta * (1 - cos(x_hat_t, p))

Pipeline per step t:

1. The query embedding q and each historical step embedding h_j are mapped
   into a shared hidden dimension by trainable linear layers f_q and f_h.
2. The projected sequence [q~, h~_1 .. h~_{t-1}] runs through a frozen,
   seeded backbone; the final position's hidden state is mapped by a
   trainable linear head f_theta back to the step-embedding dimension
   d = 2 * d_e, giving the prediction x_hat_t. The realized embedding is
   x_t := h_t.
3. A prototype vector p (query) attends over the trajectory's predictions
   (keys/values) through trainable d x d maps W_q, W_k, W_v, scaled by
   sqrt(d). During training the attention output both feeds the prototype
   alignment loss and overwrites the stored p; at inference p is frozen.

The in-process backbone (``frozen_mixer``) is a stack of seeded, fixed
blocks: causal mean over the sequence prefix concatenated with the current
position, a fixed random linear map, then tanh. It is deterministic,
order-sensitive, and strictly causal, so scoring a full trajectory in one
pass is exactly equivalent to scoring each prefix separately.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import EmbedderSpec
from .errors import ConfigError, DataError, TransportError

logger = logging.getLogger(__name__)

PARAM_ORDER = (
    "fq_w", "fq_b", "fh_w", "fh_b", "ft_w", "ft_b", "wq", "wk", "wv", "p",
)


@dataclass(frozen=True)
class BackboneSpec:
    """Frozen sequence encoder configuration.

    ``frozen_mixer`` is generated once from ``seed`` and never updated;
    ``remote_llm`` delegates to a service that exposes hidden states of a
    real frozen model (POST {endpoint}/encode).
    """

    kind: str = "frozen_mixer"  # "frozen_mixer" | "remote_llm"
    hidden_dim: int = 384
    layers: int = 2
    seed: int = 0
    endpoint: str | None = None
    model_name: str | None = None

    def __post_init__(self):
        if self.kind not in ("frozen_mixer", "remote_llm"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.hidden_dim < 1 or self.layers < 1:
            raise ConfigError("backbone hidden_dim and layers must be positive")
        if self.kind == "remote_llm" and (not self.endpoint or not self.model_name):
            raise ConfigError("remote_llm backbone requires endpoint and model_name")


class FrozenMixer:
    """Seeded stack of frozen causal mixing blocks."""

    def __init__(self, spec: BackboneSpec, input_dim: int):
        rng = np.random.RandomState(spec.seed)
        self.spec = spec
        self.input_dim = input_dim
        self.matrices_t: list[np.ndarray] = []  # pre-transposed, (2*in, out)
        in_dim = input_dim
        for _ in range(spec.layers):
            fan_in = 2 * in_dim
            bound = 1.0 / math.sqrt(fan_in)
            matrix = rng.uniform(-bound, bound, size=(spec.hidden_dim, fan_in))
            self.matrices_t.append(np.ascontiguousarray(matrix.T))
            in_dim = spec.hidden_dim

    def run(self, sequence: Tensor) -> Tensor:
        """Encode an (n, input_dim) sequence into (n, hidden_dim) states.

        Position i of the output depends only on positions <= i of the input
        (cumulative sums are sequential), so row t of a full pass equals the
        final row of a pass over the length-t prefix, bit for bit.
        """
        x = sequence
        for matrix_t in self.matrices_t:
            x = ad.tanh(ad.matmul(ad.causal_context(x), Tensor(matrix_t)))
        return x


class RemoteBackbone:
    """Client for POST {endpoint}/encode: {"model", "sequence": [[f64]]} -> {"vector"}."""

    def __init__(self, spec: BackboneSpec):
        import requests

        self.spec = spec
        self._session = requests.Session()

    def encode(self, sequence: np.ndarray) -> np.ndarray:
        import requests

        url = self.spec.endpoint.rstrip("/") + "/encode"
        body = {"model": self.spec.model_name, "sequence": sequence.tolist()}
        last_error = "no attempts made"
        for attempt in range(3):
            try:
                resp = self._session.post(url, json=body, timeout=30.0)
            except requests.RequestException as exc:
                last_error = str(exc)
                continue
            if resp.status_code != 200:
                last_error = f"HTTP {resp.status_code}"
                continue
            vector = np.asarray(resp.json()["vector"], dtype=np.float64)
            if vector.size != self.spec.hidden_dim:
                raise ConfigError(
                    f"backbone service returned dimension {vector.size}, "
                    f"expected {self.spec.hidden_dim}"
                )
            return vector
        raise TransportError(f"backbone request failed: {last_error}")


@dataclass
class DetectorModel:
    """All trainable parameters plus the frozen backbone configuration."""

    d_e: int
    d_h: int
    embedder: EmbedderSpec
    backbone: BackboneSpec
    seed: int
    with_gt: bool = False
    params: dict[str, np.ndarray] = field(default_factory=dict)
    _mixer: FrozenMixer | None = field(default=None, repr=False, compare=False)
    _remote: RemoteBackbone | None = field(default=None, repr=False, compare=False)

    @property
    def d(self) -> int:
        """Step-embedding dimension; predictions live in the same space."""
        return 2 * self.d_e

    @classmethod
    def init(
        cls,
        embedder: EmbedderSpec,
        d_h: int = 384,
        backbone: BackboneSpec | None = None,
        seed: int = 0,
        with_gt: bool = False,
    ) -> "DetectorModel":
        """Seeded initialization: uniform(+-1/sqrt(fan_in)) weights, zero
        biases, Gaussian(0, 1/sqrt(d)) prototype."""
        d_e = embedder.dimension
        d = 2 * d_e
        if backbone is None:
            backbone = BackboneSpec(hidden_dim=d_h)
        rng = np.random.RandomState(seed)

        def layer(out_dim: int, in_dim: int) -> np.ndarray:
            bound = 1.0 / math.sqrt(in_dim)
            return rng.uniform(-bound, bound, size=(out_dim, in_dim))

        params = {
            "fq_w": layer(d_h, d_e),
            "fq_b": np.zeros(d_h),
            "fh_w": layer(d_h, d),
            "fh_b": np.zeros(d_h),
            "ft_w": layer(d, backbone.hidden_dim),
            "ft_b": np.zeros(d),
            "wq": layer(d, d),
            "wk": layer(d, d),
            "wv": layer(d, d),
            "p": rng.standard_normal(d) / math.sqrt(d),
        }
        return cls(
            d_e=d_e, d_h=d_h, embedder=embedder, backbone=backbone,
            seed=seed, with_gt=with_gt, params=params,
        )

    def mixer(self) -> FrozenMixer:
        if self._mixer is None:
            self._mixer = FrozenMixer(self.backbone, self.d_h)
        return self._mixer

    def param_digest(self) -> str:
        """SHA-256 over all parameter bytes in the documented fixed order."""
        h = hashlib.sha256()
        for name in PARAM_ORDER:
            h.update(self.params[name].astype("<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "DetectorModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()})


@dataclass(frozen=True)
class StepPrediction:
    """Predicted vs realized embedding for step t (both of dimension d)."""

    x_hat: np.ndarray
    x: np.ndarray
    t: int


@dataclass(frozen=True)
class AnomalyVerdict:
    """Per-step anomaly score and its two components.

    ``score == alpha * recon_term + beta * proto_term`` exactly as computed;
    when a threshold is attached, ``flagged == (score > delta)``.
    """

    score: float
    recon_term: float
    proto_term: float
    alpha: float
    beta: float
    delta: float | None = None
    flagged: bool | None = None
    t: int | None = None


# -- forward passes -----------------------------------------------------------


def _tensor_params(model: DetectorModel) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in model.params.items()}


def projected_sequence(
    params: dict[str, Tensor], q_vec: np.ndarray, history: np.ndarray
) -> Tensor:
    """Rows [q~, f_h(h_1) .. f_h(h_k)] for a (k, 2*d_e) history matrix."""
    q_t = ad.linear(params["fq_w"], params["fq_b"], Tensor(q_vec))
    if history.shape[0] == 0:
        return ad.stack([q_t])
    h_t = ad.affine(Tensor(history), ad.transpose(params["fh_w"]), params["fh_b"])
    return ad.concat([ad.stack([q_t]), h_t], axis=0)


def predictions_tensor(
    model: DetectorModel,
    params: dict[str, Tensor],
    q_vec: np.ndarray,
    step_matrix: np.ndarray,
    upto: int | None = None,
) -> Tensor:
    """Matrix of x_hat_t rows for t = 1..upto in one causal pass."""
    T = step_matrix.shape[0] if upto is None else upto
    if T < 1:
        raise DataError("empty trajectory")
    seq = projected_sequence(params, q_vec, step_matrix[: T - 1])
    if model.backbone.kind == "frozen_mixer":
        states = model.mixer().run(seq)
    else:
        if model._remote is None:
            model._remote = RemoteBackbone(model.backbone)
        rows = [Tensor(model._remote.encode(seq.data[:t])) for t in range(1, T + 1)]
        states = ad.stack(rows)
    return ad.affine(states, ad.transpose(params["ft_w"]), params["ft_b"])


def prototype_attention(params: dict[str, Tensor], x_hats: Tensor, d: int) -> Tensor:
    """New prototype: attention with p as query and predictions as keys/values."""
    return ad.attention(
        params["p"], x_hats, x_hats,
        params["wq"], params["wk"], params["wv"], math.sqrt(d),
    )


def trajectory_loss(
    model: DetectorModel,
    params: dict[str, Tensor],
    q_vec: np.ndarray,
    step_matrix: np.ndarray,
    lam: float,
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Full training loss of one trajectory (step_matrix is T x d, row t = h_t).

    Returns (total, recon, proto, p_new) where total = recon + lam * proto,
    recon is the mean squared prediction error against x_t := h_t, and proto
    is the mean cosine misalignment of each prediction with the trajectory's
    attention-updated prototype p_new.
    """
    step_matrix = np.asarray(step_matrix, dtype=np.float64)
    T = step_matrix.shape[0]
    x_hats = predictions_tensor(model, params, q_vec, step_matrix)
    recon = ad.sq_diff_sum(x_hats, step_matrix, 1.0 / T)
    p_new = prototype_attention(params, x_hats, model.d)
    proto = ad.proto_misalignment(x_hats, p_new)
    total = recon + lam * proto
    return total, recon, proto, p_new


def _as_matrix(step_embs) -> np.ndarray:
    if isinstance(step_embs, np.ndarray) and step_embs.ndim == 2:
        return step_embs
    return np.stack(step_embs) if len(step_embs) else np.zeros((0, 0))


# -- operation surface --------------------------------------------------------


def encode_context(
    model: DetectorModel, q_vec: np.ndarray, hist: list[np.ndarray]
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Project the query and history embeddings into the hidden dimension."""
    if q_vec.shape != (model.d_e,):
        raise ConfigError(f"query vector must have dimension {model.d_e}")
    for h in hist:
        if h.shape != (model.d,):
            raise ConfigError(f"step embeddings must have dimension {model.d}")
    with ad.no_grad():
        params = _tensor_params(model)
        q_t = ad.linear(params["fq_w"], params["fq_b"], Tensor(q_vec)).data
        hist_t = [
            ad.linear(params["fh_w"], params["fh_b"], Tensor(h)).data for h in hist
        ]
    return q_t, hist_t


def predict_next(
    model: DetectorModel, q_tilde: np.ndarray, hist_tilde: list[np.ndarray]
) -> np.ndarray:
    """Predict the next step embedding from projected context vectors."""
    with ad.no_grad():
        params = _tensor_params(model)
        seq = ad.stack([Tensor(q_tilde)] + [Tensor(h) for h in hist_tilde])
        if model.backbone.kind == "frozen_mixer":
            state = model.mixer().run(seq)[seq.shape[0] - 1]
        else:
            if model._remote is None:
                model._remote = RemoteBackbone(model.backbone)
            state = Tensor(model._remote.encode(seq.data))
        return ad.linear(params["ft_w"], params["ft_b"], state).data


def update_prototype(model: DetectorModel, x_hats: np.ndarray) -> np.ndarray:
    """Attention output that replaces the prototype during training."""
    x_hats = np.atleast_2d(np.asarray(x_hats, dtype=np.float64))
    if x_hats.shape[0] == 0:
        raise DataError("empty trajectory")
    with ad.no_grad():
        params = _tensor_params(model)
        return prototype_attention(params, Tensor(x_hats), model.d).data


def loss_recon(preds: list[StepPrediction]) -> float:
    """Mean squared error between predicted and realized embeddings."""
    if not preds:
        raise DataError("loss_recon needs at least one prediction")
    return float(
        sum(float(np.sum((p.x_hat - p.x) ** 2)) for p in preds) / len(preds)
    )


def _safe_cos(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine with the zero-norm guard: degenerate vectors count as cos 0."""
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        logger.warning("zero-norm vector in cosine; treating cos as 0")
        return 0.0
    return float(a @ b) / (na * nb)


def loss_proto(preds: list[StepPrediction], p: np.ndarray) -> float:
    """Mean cosine misalignment of predictions with the prototype."""
    if not preds:
        raise DataError("loss_proto needs at least one prediction")
    if float(np.linalg.norm(p)) == 0.0:
        raise DataError("prototype must have positive norm")
    return float(sum(1.0 - _safe_cos(pr.x_hat, p) for pr in preds) / len(preds))


def total_loss(preds: list[StepPrediction], p: np.ndarray, lam: float) -> float:
    """Weighted combination: loss_recon + lam * loss_proto."""
    if lam < 0:
        raise DataError("lambda must be >= 0")
    return loss_recon(preds) + lam * loss_proto(preds, p)


def anomaly_score(
    model: DetectorModel,
    x_hat: np.ndarray,
    x: np.ndarray,
    alpha: float,
    beta: float,
) -> AnomalyVerdict:
    """Score one step without applying a threshold."""
    if alpha < 0 or beta < 0 or (alpha == 0 and beta == 0):
        raise ConfigError("alpha and beta must be >= 0 and not both zero")
    recon_term = float(np.sum((x_hat - x) ** 2))
    proto_term = 1.0 - _safe_cos(x_hat, model.params["p"])
    return AnomalyVerdict(
        score=alpha * recon_term + beta * proto_term,
        recon_term=recon_term,
        proto_term=proto_term,
        alpha=alpha,
        beta=beta,
    )


def detect(
    model: DetectorModel,
    q_vec: np.ndarray,
    step_embs,
    t: int,
    alpha: float,
    beta: float,
    delta: float,
) -> AnomalyVerdict:
    """Score step t against its history and apply the threshold.

    Only embeddings for steps 1..t are read; the verdict for step t on a
    trajectory equals the verdict on the trajectory truncated at t.
    """
    step_matrix = _as_matrix(step_embs)
    if not (1 <= t <= step_matrix.shape[0]):
        raise DataError(f"step index {t} out of range 1..{step_matrix.shape[0]}")
    with ad.no_grad():
        params = _tensor_params(model)
        x_hats = predictions_tensor(model, params, q_vec, step_matrix, upto=t)
        x_hat = x_hats.data[t - 1]
    verdict = anomaly_score(model, x_hat, step_matrix[t - 1], alpha, beta)
    return replace(verdict, delta=delta, flagged=bool(verdict.score > delta), t=t)


def score_trajectory(
    model: DetectorModel,
    q_vec: np.ndarray,
    step_embs,
    alpha: float,
    beta: float,
    delta: float = math.inf,
) -> list[AnomalyVerdict]:
    """Verdicts for every step in one causal pass.

    Exactly equivalent to calling ``detect`` per step (the backbone is
    strictly causal), but runs the sequence encoder once.
    """
    step_matrix = _as_matrix(step_embs)
    if step_matrix.shape[0] == 0:
        raise DataError("empty trajectory")
    with ad.no_grad():
        params = _tensor_params(model)
        x_hats = predictions_tensor(model, params, q_vec, step_matrix).data
    out = []
    for t in range(1, step_matrix.shape[0] + 1):
        verdict = anomaly_score(model, x_hats[t - 1], step_matrix[t - 1], alpha, beta)
        out.append(
            replace(verdict, delta=delta, flagged=bool(verdict.score > delta), t=t)
        )
    return out
