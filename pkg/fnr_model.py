"""
FNR network head.

    F_T = w2 gelu(w1 B + b1) + (w1 B + b1) + b2      text projector
    F_I = w4 gelu(w3 V + b3) + (w3 V + b3) + b4      image projector
    F_c = concat(F_T, F_I)
    F   = softmax(w6 gelu(w5 F_c + b5) + b6)         classifier
    l   = l_c + lambda * l_s

Modes:
- fused_s:    both projectors, classification + similarity loss
- fused_ws:   both projectors, classification loss only
- text_only:  image block of F_c is zeros, image projector never runs
- image_only: text block of F_c is zeros, text projector never runs

Labels: real = 0, fake = 1; output columns are [real, fake].
"""

import logging
from dataclasses import dataclass, fields, asdict

import numpy as np

from autodiff import Graph, dtype_for, LOG_CLAMP
from config import PROJECTION_SIZE, HIDDEN_SIZE, DROPOUT_RATE, LAMBDA, MODES
from contrastive import contrastive_loss
from errors import ContractError, DataError, ShapeError

logger = logging.getLogger(__name__)

REAL, FAKE = 0, 1
CLASS_NAMES = {REAL: "real", FAKE: "fake"}


@dataclass
class ProjectorParams:
    w1: np.ndarray  # d_in x k
    b1: np.ndarray  # k
    w2: np.ndarray  # k x k
    b2: np.ndarray  # k


@dataclass
class ClassifierParams:
    w5: np.ndarray  # 2k x h
    b5: np.ndarray  # h
    w6: np.ndarray  # h x 2
    b6: np.ndarray  # 2


@dataclass
class FNRParams:
    text: ProjectorParams
    image: ProjectorParams
    classifier: ClassifierParams

    _GROUPS = (("text_projector", "text"), ("image_projector", "image"), ("classifier", "classifier"))

    def as_dict(self):
        """Flat {"text_projector.w1": array, ...} view (arrays are shared, not copied)."""
        out = {}
        for prefix, attr in self._GROUPS:
            part = getattr(self, attr)
            for f in fields(part):
                out[f"{prefix}.{f.name}"] = getattr(part, f.name)
        return out

    @classmethod
    def from_dict(cls, values):
        parts = {}
        for prefix, attr in cls._GROUPS:
            kind = ClassifierParams if attr == "classifier" else ProjectorParams
            try:
                parts[attr] = kind(**{f.name: np.asarray(values[f"{prefix}.{f.name}"]) for f in fields(kind)})
            except KeyError as e:
                raise DataError(f"Missing parameter tensor {e.args[0]}") from None
        return cls(**parts)

    def copy(self, dtype=None):
        return FNRParams.from_dict({n: np.array(v, dtype=dtype or v.dtype) for n, v in self.as_dict().items()})

    @property
    def d_in(self):
        return self.text.w1.shape[0]


@dataclass(frozen=True)
class ModelConfig:
    k: int = PROJECTION_SIZE
    h: int = HIDDEN_SIZE
    dropout_rate: float = DROPOUT_RATE
    lam: float = LAMBDA
    mode: str = "fused_s"
    seed: int = 0
    precision: str = "standard"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"Unknown mode {self.mode!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ContractError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.lam < 0:
            raise ContractError(f"lambda must be >= 0, got {self.lam}")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClassBalance:
    """alpha weights the minority class of the training split; the other class weighs 1."""

    alpha: float = 1.0
    minority: int = FAKE

    def __post_init__(self):
        if self.alpha < 1.0:
            raise ContractError(f"alpha must be >= 1, got {self.alpha}")
        if self.minority not in (REAL, FAKE):
            raise ContractError(f"minority class must be 0 or 1, got {self.minority}")

    @property
    def weights(self):
        w = [1.0, 1.0]
        w[self.minority] = self.alpha
        return tuple(w)


@dataclass
class LossBreakdown:
    l_T: float
    l_I: float
    l_s: float
    l_c: float
    total: float
    alpha: float
    lam: float

    def to_dict(self):
        return asdict(self)


def _glorot(rng, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def init_params(d_in, config):
    """Glorot-uniform weights, zero biases, seeded by config.seed."""
    rng = np.random.default_rng(config.seed)
    dtype = dtype_for(config.precision)
    k, h = config.k, config.h

    def projector():
        return ProjectorParams(
            w1=_glorot(rng, d_in, k, dtype),
            b1=np.zeros(k, dtype=dtype),
            w2=_glorot(rng, k, k, dtype),
            b2=np.zeros(k, dtype=dtype),
        )

    text, image = projector(), projector()
    classifier = ClassifierParams(
        w5=_glorot(rng, 2 * k, h, dtype),
        b5=np.zeros(h, dtype=dtype),
        w6=_glorot(rng, h, 2, dtype),
        b6=np.zeros(2, dtype=dtype),
    )
    return FNRParams(text=text, image=image, classifier=classifier)


# ---------------------------------------------------------------------- #
# graph builders
# ---------------------------------------------------------------------- #
def _dropout(graph, node, dropout_on, rate, rng):
    if not dropout_on or rate == 0.0:
        return node
    if rng is None:
        raise ContractError("dropout is on but no random generator was given")
    return graph.dropout(node, rate, rng)


def project_nodes(graph, p, x, dropout_on=False, rng=None, rate=DROPOUT_RATE):
    """p maps w1/b1/w2/b2 to node ids; x is a b x d_in node."""
    if graph.shape(x)[1] != graph.shape(p["w1"])[0]:
        raise ShapeError(f"projector expects {graph.shape(p['w1'])[0]} input columns, got {graph.shape(x)[1]}")
    branch = graph.add_row(graph.matmul(x, p["w1"]), p["b1"])
    activated = _dropout(graph, graph.gelu(branch), dropout_on, rate, rng)
    return graph.add_row(graph.add(graph.matmul(activated, p["w2"]), branch), p["b2"])


def classify_nodes(graph, f_t, f_i, p, dropout_on=False, rng=None, rate=DROPOUT_RATE):
    fused = graph.concat(f_t, f_i)
    hidden = graph.gelu(graph.add_row(graph.matmul(fused, p["w5"]), p["b5"]))
    hidden = _dropout(graph, hidden, dropout_on, rate, rng)
    return graph.softmax_rows(graph.add_row(graph.matmul(hidden, p["w6"]), p["b6"]))


def _check_labels(labels):
    labels = np.asarray(labels)
    bad = labels[(labels != REAL) & (labels != FAKE)]
    if bad.size:
        raise DataError(f"Labels must be 0 (real) or 1 (fake), found {bad[0]!r}")
    return labels.astype(np.int64)


def classification_loss_node(graph, probs, labels, balance):
    """Mean over the batch of -w_y ln(probs[i, y_i]) with a clamped log."""
    labels = _check_labels(labels)
    b = graph.shape(probs)[0]
    if labels.shape != (b,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 0} labels for {b} rows")
    weights = np.zeros((b, 2))
    weights[np.arange(b), labels] = np.asarray(balance.weights)[labels]
    picked = graph.mul(graph.constant(weights), graph.log(graph.clamp(probs, LOG_CLAMP, 1.0 - LOG_CLAMP)))
    return graph.scale(graph.sum(picked), -1.0 / b)


def _part(nodes, prefix):
    return {n.split(".", 1)[1]: node for n, node in nodes.items() if n.startswith(prefix + ".")}


def _features(graph, nodes, text, image, config, dropout_on=False, rng=None):
    """(F_T, F_I) nodes; the absent modality of a single-modality mode is a zero block."""
    b = len(text)
    k = graph.shape(nodes["text_projector.w2"])[1]
    if config.mode == "image_only":
        f_t = graph.constant(np.zeros((b, k)))
    else:
        f_t = project_nodes(graph, _part(nodes, "text_projector"), graph.constant(text), dropout_on, rng, config.dropout_rate)
    if config.mode == "text_only":
        f_i = graph.constant(np.zeros((b, k)))
    else:
        f_i = project_nodes(graph, _part(nodes, "image_projector"), graph.constant(image), dropout_on, rng, config.dropout_rate)
    return f_t, f_i


@dataclass
class ForwardPass:
    graph: Graph
    param_nodes: dict
    probs: int
    l_T: int
    l_I: int
    l_s: int
    l_c: int
    total: int


def build_loss(text, image, labels, params, config, dropout_on=False, rng=None, balance=ClassBalance()):
    """Build the full training graph for one batch."""
    if len(labels) == 0:
        raise ContractError("empty batch")
    graph = Graph(config.precision)
    nodes = {name: graph.leaf(value, trainable=True) for name, value in params.as_dict().items()}

    f_t, f_i = _features(graph, nodes, text, image, config, dropout_on, rng)
    probs = classify_nodes(graph, f_t, f_i, _part(nodes, "classifier"), dropout_on, rng, config.dropout_rate)
    l_c = classification_loss_node(graph, probs, labels, balance)

    l_t = l_i = l_s = None
    total = l_c
    if config.mode == "fused_s":
        l_t, l_i, l_s = contrastive_loss(graph, f_t, f_i)
        total = graph.add(l_c, graph.scale(l_s, config.lam))

    return ForwardPass(graph, nodes, probs, l_t, l_i, l_s, l_c, total)


def _breakdown(fp, config, balance):
    g = fp.graph

    def read(node):
        return g.scalar(node) if node is not None else 0.0

    return LossBreakdown(
        l_T=read(fp.l_T),
        l_I=read(fp.l_I),
        l_s=read(fp.l_s),
        l_c=read(fp.l_c),
        total=read(fp.total),
        alpha=balance.alpha,
        lam=config.lam,
    )


# ---------------------------------------------------------------------- #
# public operations
# ---------------------------------------------------------------------- #
def forward_loss(batch, params, config, dropout_on=False, rng=None, balance=ClassBalance()):
    """Returns (LossBreakdown, probs)."""
    fp = build_loss(batch.text, batch.image, batch.labels, params, config, dropout_on, rng, balance)
    return _breakdown(fp, config, balance), fp.graph.value(fp.probs)


def loss_and_grads(batch, params, config, dropout_on=False, rng=None, balance=ClassBalance()):
    """Returns (LossBreakdown, probs, {param name: gradient shaped like the param})."""
    fp = build_loss(batch.text, batch.image, batch.labels, params, config, dropout_on, rng, balance)
    grads = fp.graph.backward(fp.total)
    shapes = {name: value.shape for name, value in params.as_dict().items()}
    named = {name: grads[node].reshape(shapes[name]) for name, node in fp.param_nodes.items()}
    return _breakdown(fp, config, balance), fp.graph.value(fp.probs), named


def project(p, x, dropout_on=False, rng=None, rate=DROPOUT_RATE, precision="extended"):
    graph = Graph(precision)
    nodes = {f.name: graph.constant(getattr(p, f.name)) for f in fields(p)}
    return graph.value(project_nodes(graph, nodes, graph.constant(x), dropout_on, rng, rate))


def classify(f_t, f_i, p, dropout_on=False, rng=None, rate=DROPOUT_RATE, precision="extended"):
    graph = Graph(precision)
    nodes = {f.name: graph.constant(getattr(p, f.name)) for f in fields(p)}
    return graph.value(classify_nodes(graph, graph.constant(f_t), graph.constant(f_i), nodes, dropout_on, rng, rate))


def classification_loss(probs, labels, alpha=1.0, minority=FAKE, precision="extended"):
    graph = Graph(precision)
    node = classification_loss_node(graph, graph.constant(probs), labels, ClassBalance(alpha, minority))
    return graph.scalar(node)


def predict_proba(params, config, text, image):
    """Class probabilities [real, fake] with dropout off."""
    graph = Graph(config.precision)
    nodes = {name: graph.constant(value) for name, value in params.as_dict().items()}

    f_t, f_i = _features(graph, nodes, text, image, config)
    return graph.value(classify_nodes(graph, f_t, f_i, _part(nodes, "classifier")))


def predict(probs):
    """argmax over [real, fake]; ties go to real."""
    return np.argmax(probs, axis=1).astype(np.int64)
