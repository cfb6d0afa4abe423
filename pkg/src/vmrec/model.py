"""Two-branch embedding network with an optional fusion head.

Each branch is a stack of fully-connected layers: ReLU on every hidden
layer, a linear last layer, then batch normalisation. Dropout follows each
hidden ReLU in train mode. The fusion head scores a (music, video) embedding
pair: concatenation, ReLU hidden layers, one sigmoid output unit.

Parameters live in a flat ``{name: ndarray}`` dict so the optimizer can treat
them uniformly. Names follow ``<branch>.fc<i>.W``, ``<branch>.fc<i>.b``,
``<branch>.bn.gamma``, ``<branch>.bn.beta`` and ``head.fc<i>.{W,b}``; batchnorm
running statistics are kept separately in ``buffers``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (
    ShapeError,
    batchnorm,
    batchnorm_backward,
    dropout,
    dropout_backward,
    fc_backward,
    fc_forward,
)

BRANCHES = ("music", "video")
CHECKPOINT_FORMAT = 1

# widths from the reference architecture
REFERENCE_MUSIC_WIDTHS = (2048, 1024, 512)
REFERENCE_VIDEO_WIDTHS = (2048, 512)
REFERENCE_HEAD_WIDTHS = (1024, 128, 1)
REFERENCE_MUSIC_DIM = 1140
REFERENCE_VIDEO_DIM = 1024


@dataclass(frozen=True)
class BranchSpec:
    input_dim: int
    layer_widths: tuple

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.input_dim < 1 or not self.layer_widths or min(self.layer_widths) < 1:
            raise ValueError(f"invalid branch spec: input {self.input_dim}, widths {self.layer_widths}")

    @property
    def output_dim(self):
        return self.layer_widths[-1]


@dataclass
class ModelParams:
    music_spec: BranchSpec
    video_spec: BranchSpec
    head_widths: tuple | None
    params: dict
    buffers: dict
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    @property
    def embedding_dim(self):
        return self.music_spec.output_dim

    def spec(self, branch):
        return self.music_spec if branch == "music" else self.video_spec

    def with_params(self, params, buffers=None):
        return replace(self, params=params, buffers=self.buffers if buffers is None else buffers)


@dataclass(frozen=True)
class EmbeddingBatch:
    clip_ids: tuple
    E: np.ndarray
    modality: str


def _he(rng, fan_in, fan_out):
    return rng.normal((fan_in, fan_out), scale=np.sqrt(2.0 / fan_in))


def _lecun(rng, fan_in, fan_out):
    return rng.normal((fan_in, fan_out), scale=np.sqrt(1.0 / fan_in))


def init_model(music_spec, video_spec, with_fusion_head, rng, head_widths=REFERENCE_HEAD_WIDTHS, **bn):
    """Fresh parameters.

    Layers feeding a ReLU draw ``W ~ N(0, 2 / fan_in)``; the last layer of each
    branch and of the head draws ``W ~ N(0, 1 / fan_in)``. Biases start at 0,
    batchnorm at gamma=1, beta=0, running mean 0 and running variance 1.
    """
    if music_spec.output_dim != video_spec.output_dim:
        raise ShapeError(
            f"branches must share the embedding size: music {music_spec.output_dim}, video {video_spec.output_dim}"
        )
    params, buffers = {}, {}
    for b_idx, (branch, spec) in enumerate(zip(BRANCHES, (music_spec, video_spec))):
        fan_in = spec.input_dim
        for i, width in enumerate(spec.layer_widths):
            last = i == len(spec.layer_widths) - 1
            init = _lecun if last else _he
            params[f"{branch}.fc{i}.W"] = init(rng.child(b_idx, i), fan_in, width)
            params[f"{branch}.fc{i}.b"] = np.zeros(width)
            fan_in = width
        params[f"{branch}.bn.gamma"] = np.ones(fan_in)
        params[f"{branch}.bn.beta"] = np.zeros(fan_in)
        buffers[f"{branch}.bn.running_mean"] = np.zeros(fan_in)
        buffers[f"{branch}.bn.running_var"] = np.ones(fan_in)
    widths = None
    if with_fusion_head:
        widths = tuple(int(w) for w in head_widths)
        if not widths or min(widths) < 1 or widths[-1] != 1:
            raise ValueError(f"head widths must be positive and end in 1, got {widths}")
        fan_in = 2 * music_spec.output_dim
        for i, width in enumerate(widths):
            init = _lecun if i == len(widths) - 1 else _he
            params[f"head.fc{i}.W"] = init(rng.child(2, i), fan_in, width)
            params[f"head.fc{i}.b"] = np.zeros(width)
            fan_in = width
    return ModelParams(music_spec, video_spec, widths, params, buffers, **bn)


def reference_model(rng, with_fusion_head=False):
    """The full-size reference architecture (1140/1024 inputs, 512-d embeddings)."""
    return init_model(
        BranchSpec(REFERENCE_MUSIC_DIM, REFERENCE_MUSIC_WIDTHS),
        BranchSpec(REFERENCE_VIDEO_DIM, REFERENCE_VIDEO_WIDTHS),
        with_fusion_head,
        rng,
    )


@dataclass
class BranchCache:
    branch: str
    layers: list
    masks: list
    bn: object
    buffers: dict = field(default_factory=dict)


def embed(X, branch, model, mode="infer", dropout_p=0.0, rng=None):
    """Embed a batch of one modality. Returns ``(E, cache)``.

    In train mode ``cache.buffers`` holds the updated batchnorm running
    statistics; the model itself is not modified.
    """
    if branch not in BRANCHES:
        raise ValueError(f"unknown branch {branch!r}")
    spec = model.spec(branch)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ShapeError(f"{branch} branch expects {spec.input_dim} input columns, got shape {X.shape}")
    if mode == "train" and dropout_p > 0.0 and rng is None:
        raise ValueError("train-mode dropout needs an RngStream")
    p = model.params
    h = X
    layers, masks = [], []
    n_layers = len(spec.layer_widths)
    for i in range(n_layers):
        last = i == n_layers - 1
        h, c = fc_forward(h, p[f"{branch}.fc{i}.W"], p[f"{branch}.fc{i}.b"], "linear" if last else "relu")
        layers.append(c)
        if not last:
            h, mask = dropout(h, dropout_p, mode, rng)
            masks.append(mask)
    E, bn_cache, (rm, rv) = batchnorm(
        h,
        p[f"{branch}.bn.gamma"],
        p[f"{branch}.bn.beta"],
        model.buffers[f"{branch}.bn.running_mean"],
        model.buffers[f"{branch}.bn.running_var"],
        mode,
        model.bn_momentum,
        model.bn_eps,
    )
    buffers = {f"{branch}.bn.running_mean": rm, f"{branch}.bn.running_var": rv}
    return E, BranchCache(branch, layers, masks, bn_cache, buffers)


def branch_backward(dE, cache):
    """Return ``(dX, grads)`` for one branch."""
    b = cache.branch
    grads = {}
    dh, grads[f"{b}.bn.gamma"], grads[f"{b}.bn.beta"] = batchnorm_backward(dE, cache.bn)
    for i in range(len(cache.layers) - 1, -1, -1):
        if i < len(cache.masks):
            dh = dropout_backward(dh, cache.masks[i])
        dh, grads[f"{b}.fc{i}.W"], grads[f"{b}.fc{i}.b"] = fc_backward(dh, cache.layers[i])
    return dh, grads


@dataclass
class HeadCache:
    layers: list
    masks: list
    scores: np.ndarray
    music_rows: np.ndarray
    video_rows: np.ndarray
    n_music: int
    n_video: int


def fusion_score(E_M, E_V, model, mode="infer", dropout_p=0.0, rng=None, music_rows=None, video_rows=None):
    """Match probability for embedding pairs. Returns ``(scores, cache)``.

    Pair ``i`` is ``(E_M[music_rows[i]], E_V[video_rows[i]])``; by default rows
    are paired index by index.
    """
    if model.head_widths is None:
        raise ValueError("model has no fusion head")
    E_M = np.asarray(E_M, dtype=np.float64)
    E_V = np.asarray(E_V, dtype=np.float64)
    if music_rows is None and video_rows is None:
        if E_M.shape[0] != E_V.shape[0]:
            raise ShapeError(f"fusion_score: batches differ in size, {E_M.shape[0]} vs {E_V.shape[0]}")
        music_rows = video_rows = np.arange(E_M.shape[0])
    music_rows = np.asarray(music_rows, dtype=np.int64)
    video_rows = np.asarray(video_rows, dtype=np.int64)
    h = np.concatenate([E_M[music_rows], E_V[video_rows]], axis=1)
    layers, masks = [], []
    n_layers = len(model.head_widths)
    for i in range(n_layers):
        last = i == n_layers - 1
        h, c = fc_forward(h, model.params[f"head.fc{i}.W"], model.params[f"head.fc{i}.b"], "linear" if last else "relu")
        layers.append(c)
        if not last:
            h, mask = dropout(h, dropout_p, mode, rng)
            masks.append(mask)
    scores = _sigmoid(h[:, 0])
    return scores, HeadCache(layers, masks, scores, music_rows, video_rows, E_M.shape[0], E_V.shape[0])


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def head_backward(dscores, cache):
    """Return ``(dE_M, dE_V, grads)``; pair gradients are summed back onto their source rows."""
    s = cache.scores
    dh = (np.asarray(dscores, dtype=np.float64) * s * (1.0 - s))[:, None]
    grads = {}
    for i in range(len(cache.layers) - 1, -1, -1):
        if i < len(cache.masks):
            dh = dropout_backward(dh, cache.masks[i])
        dh, grads[f"head.fc{i}.W"], grads[f"head.fc{i}.b"] = fc_backward(dh, cache.layers[i])
    d = dh.shape[1] // 2
    dE_M = np.zeros((cache.n_music, d))
    dE_V = np.zeros((cache.n_video, d))
    np.add.at(dE_M, cache.music_rows, dh[:, :d])
    np.add.at(dE_V, cache.video_rows, dh[:, d:])
    return dE_M, dE_V, grads


def model_backward(upstream, caches, model):
    """Gradients for every trainable tensor.

    ``upstream`` maps ``"music"``/``"video"`` to the loss gradient wrt that
    branch's embeddings and optionally ``"head"`` to the gradient wrt fusion
    scores; ``caches`` holds the matching forward caches under the same keys.
    Tensors not reached by this pass get zero gradients.
    """
    upstream = dict(upstream)
    grads = {}
    if "head" in upstream:
        dE_M, dE_V, head_grads = head_backward(upstream["head"], caches["head"])
        grads.update(head_grads)
        for branch, dE in (("music", dE_M), ("video", dE_V)):
            upstream[branch] = dE if upstream.get(branch) is None else upstream[branch] + dE
    for branch in BRANCHES:
        if upstream.get(branch) is None:
            continue
        if caches.get(branch) is None:
            raise ValueError(f"no forward cache for the {branch} branch")
        _, g = branch_backward(upstream[branch], caches[branch])
        grads.update(g)
    return {name: grads.get(name, np.zeros_like(w)) for name, w in model.params.items()}


# -- checkpoints --------------------------------------------------------------


def model_to_dict(model, train_config=None):
    def tensors(d):
        return {k: {"shape": list(v.shape), "values": v.ravel().tolist()} for k, v in d.items()}

    return {
        "format_version": CHECKPOINT_FORMAT,
        "music_spec": {"input_dim": model.music_spec.input_dim, "layer_widths": list(model.music_spec.layer_widths)},
        "video_spec": {"input_dim": model.video_spec.input_dim, "layer_widths": list(model.video_spec.layer_widths)},
        "head_widths": None if model.head_widths is None else list(model.head_widths),
        "bn_momentum": model.bn_momentum,
        "bn_eps": model.bn_eps,
        "params": tensors(model.params),
        "buffers": tensors(model.buffers),
        "train_config": train_config,
    }


def model_from_dict(doc):
    if doc.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')!r}")

    def tensors(d):
        return {k: np.array(v["values"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}

    model = ModelParams(
        BranchSpec(doc["music_spec"]["input_dim"], doc["music_spec"]["layer_widths"]),
        BranchSpec(doc["video_spec"]["input_dim"], doc["video_spec"]["layer_widths"]),
        None if doc["head_widths"] is None else tuple(doc["head_widths"]),
        tensors(doc["params"]),
        tensors(doc["buffers"]),
        doc["bn_momentum"],
        doc["bn_eps"],
    )
    return model, doc.get("train_config")


def save_checkpoint(path, model, train_config=None):
    Path(path).write_text(json.dumps(model_to_dict(model, train_config)) + "\n", encoding="utf-8")


def load_checkpoint(path):
    """Return ``(model, train_config_dict_or_None)``."""
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
