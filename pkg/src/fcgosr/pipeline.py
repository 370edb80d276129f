"""Two-stage training: detransformation-autoencoder pre-training, then fine-tuning.

Pre-training feeds ``views`` transformed copies of every known-class graph
through encoder and decoder and reconstructs the untransformed original.
Fine-tuning drops the decoder and trains the encoder on untransformed inputs
with either a softmax classifier head (cross entropy) or a triplet loss on
the representation layer directly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .graph import AdjacencyTensor
from .osr import UNKNOWN
from .transforms import KINDS, TransformSpec, apply_transform

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOSS_KINDS = ("cross_entropy", "triplet")


@dataclass
class NetworkConfig:
    size: int = 67
    encoder: str = "dense"
    hidden: list[int] = field(default_factory=lambda: [64])
    rep_dim: int = 6
    dropout: float = 0.2
    # read "keep probability 0.2" literally, i.e. drop 80%
    literal_keep_prob: bool = False
    conv_channels: list[int] = field(default_factory=lambda: [32, 64])
    conv_hidden: int = 256

    def __post_init__(self):
        if self.encoder not in ("dense", "conv"):
            raise ValueError(f"unknown encoder kind {self.encoder!r}")
        if self.rep_dim < 1:
            raise ValueError("rep_dim must be >= 1")

    @property
    def drop_rate(self) -> float:
        return 1.0 - self.dropout if self.literal_keep_prob else self.dropout


@dataclass
class PretrainConfig:
    views: int = 4
    kinds: list[str] = field(default_factory=lambda: ["fcg_random"])
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.001
    seed: int = 0
    drop_rate: float = 0.2
    walk_len: int | None = None
    # make view t=0 the untransformed original
    include_original: bool = False

    def __post_init__(self):
        if self.views < 1:
            raise ValueError("views must be >= 1")
        bad = [k for k in self.kinds if k not in KINDS]
        if bad or not self.kinds:
            raise ValueError(f"invalid transform kinds {self.kinds!r}")


@dataclass
class FinetuneConfig:
    loss: str = "cross_entropy"
    epochs: int = 30
    batch_size: int = 32
    margin: float = 0.5
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.loss == "ce":
            self.loss = "cross_entropy"
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown fine-tuning loss {self.loss!r}")
        if self.loss == "triplet" and not self.margin > 0:
            raise ValueError("triplet margin must be positive")


@dataclass
class TrainedModel:
    network: NetworkConfig
    encoder: nn.Sequential
    decoder: nn.Sequential | None = None
    head: nn.Sequential | None = None
    known_classes: list[int] = field(default_factory=list)
    pretrain: PretrainConfig | None = None
    finetune: FinetuneConfig | None = None
    history: dict[str, list[float]] = field(default_factory=dict)


@dataclass
class RepresentationSet:
    z: np.ndarray
    labels: np.ndarray
    ids: list[str]

    def __len__(self):
        return len(self.labels)

    def to_records(self) -> list[dict]:
        return [{"id": i, "label": int(l), "z": row.tolist()}
                for i, l, row in zip(self.ids, self.labels, self.z)]

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "RepresentationSet":
        if not records:
            return cls(np.zeros((0, 0)), np.zeros(0, dtype=np.int64), [])
        return cls(np.asarray([r["z"] for r in records], dtype=np.float64),
                   np.asarray([int(r["label"]) for r in records], dtype=np.int64),
                   [str(r["id"]) for r in records])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.to_records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RepresentationSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_records([json.loads(l) for l in fh if l.strip()])


# network construction --------------------------------------------------------

def _child_rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *tags]))


def build_encoder(cfg: NetworkConfig, rng: np.random.Generator) -> nn.Sequential:
    s = cfg.size
    layers: list[nn.Layer] = []
    if cfg.encoder == "conv":
        layers.append(nn.Reshape((1, s, s)))
        ch_in, side = 1, s
        for ch in cfg.conv_channels:
            layers += [nn.Conv2D(ch_in, ch, 3, 1, rng=rng), nn.ReLU(), nn.MaxPool2D(3, 2)]
            ch_in, side = ch, (side - 3) // 2 + 1
        layers.append(nn.Flatten())
        width = ch_in * side * side
        hidden = [cfg.conv_hidden]
    else:
        layers.append(nn.Flatten())
        width = s * s
        hidden = cfg.hidden
    for h in hidden:
        layers += [nn.Dense(width, h, rng), nn.ReLU(), nn.Dropout(cfg.drop_rate)]
        width = h
    layers.append(nn.Dense(width, cfg.rep_dim, rng))
    return nn.Sequential(layers)


def build_decoder(cfg: NetworkConfig, rng: np.random.Generator) -> nn.Sequential:
    hidden = [cfg.conv_hidden] if cfg.encoder == "conv" else cfg.hidden
    layers: list[nn.Layer] = []
    width = cfg.rep_dim
    for h in reversed(hidden):
        layers += [nn.Dense(width, h, rng), nn.ReLU()]
        width = h
    layers += [nn.Dense(width, cfg.size * cfg.size, rng), nn.Sigmoid(), nn.Reshape((cfg.size, cfg.size))]
    return nn.Sequential(layers)


def init_model(cfg: NetworkConfig, seed: int) -> TrainedModel:
    rng = _child_rng(seed, 1)
    return TrainedModel(cfg, build_encoder(cfg, rng), build_decoder(cfg, rng))


def _stack(corpus: Sequence[AdjacencyTensor] | np.ndarray, size: int) -> np.ndarray:
    if isinstance(corpus, np.ndarray):
        x = corpus.astype(np.float64, copy=False)
    else:
        x = np.stack([a.data for a in corpus]) if len(corpus) else np.zeros((0, size, size))
    if x.ndim != 3 or x.shape[1:] != (size, size):
        raise nn.ShapeError(f"expected tensors of shape ({size}, {size}), got {x.shape[1:]}")
    return x


def _audit(labels, known: set[int] | None) -> None:
    if labels is None or known is None:
        return
    stray = set(np.asarray(labels).tolist()) - known
    if stray:
        raise ValueError(f"training batch contains non-known labels {sorted(stray)}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# pre-training -------------------------------------------------------------------

def make_views(tensors: Sequence[AdjacencyTensor], cfg: PretrainConfig,
               rng: np.random.Generator) -> np.ndarray:
    """Transformed copies with shape ``(views, N, S, S)``."""
    out = np.empty((cfg.views, len(tensors)) + tensors[0].data.shape)
    for i, a in enumerate(tensors):
        for t in range(cfg.views):
            if cfg.include_original and t == 0:
                out[t, i] = a.data
                continue
            kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
            spec = TransformSpec(kind=kind, drop_rate=cfg.drop_rate, walk_len=cfg.walk_len,
                                 seed=int(rng.integers(2**63)))
            out[t, i] = apply_transform(spec, a).tensor.data
    return out


def pretrain_dtae(corpus: Sequence[AdjacencyTensor], cfg: PretrainConfig,
                  network: NetworkConfig | None = None, labels=None,
                  known: Sequence[int] | None = None) -> TrainedModel:
    """Pre-train encoder and decoder to undo the configured transformations.

    The optimized quantity per batch is half the summed squared error over
    all views and cells; the recorded history is that sum divided by the
    number of (sample, view) pairs in the epoch.
    """
    if len(corpus) == 0:
        raise ValueError("pre-training corpus is empty")
    network = network or NetworkConfig(size=corpus[0].size)
    x_all = _stack(corpus, network.size)
    known_set = None if known is None else set(int(k) for k in known)
    if labels is not None:
        labels = np.asarray(labels)
        _audit(labels, known_set)
    model = init_model(network, cfg.seed)
    model.pretrain = cfg
    model.history["pretrain"] = []
    net = model.encoder + model.decoder
    adam = nn.Adam(cfg.lr)
    rng = _child_rng(cfg.seed, 2)
    n = len(corpus)
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(n, cfg.batch_size, rng):
            if labels is not None:
                _audit(labels[idx], known_set)
            x = x_all[idx]
            views = make_views([corpus[i] for i in idx], cfg, rng)
            inp = views.reshape((-1,) + x.shape[1:])
            out = net.forward(inp, "train", int(rng.integers(2**63)))
            loss, g = nn.dtae_loss_with_grad(x, out.reshape(views.shape))
            nn.backward_and_step(net, g.reshape(out.shape), adam)
            total += loss
        model.history["pretrain"].append(total / (n * cfg.views))
        log.debug("pretrain epoch %d loss %.6f", epoch, model.history["pretrain"][-1])
    return model


# fine-tuning ------------------------------------------------------------------------

def finetune(model: TrainedModel | None, corpus: Sequence[AdjacencyTensor], labels,
             cfg: FinetuneConfig, known: Sequence[int] | None = None,
             network: NetworkConfig | None = None) -> TrainedModel:
    """Fine-tune the encoder on untransformed inputs.

    Without a pre-trained ``model`` a fresh encoder is drawn from ``cfg.seed``,
    which is the no-pre-training baseline.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(corpus) != len(labels):
        raise ValueError("corpus and labels differ in length")
    if len(corpus) == 0:
        raise ValueError("fine-tuning corpus is empty")
    known = sorted(set(labels.tolist())) if known is None else sorted(int(k) for k in known)
    known_set = set(known)
    if UNKNOWN in known_set:
        raise ValueError("the UNKNOWN label cannot be a known class")
    _audit(labels, known_set)
    if cfg.loss == "triplet" and len(set(labels.tolist())) < 2:
        raise ValueError("triplet fine-tuning needs at least two known classes")

    if model is None:
        network = network or NetworkConfig(size=corpus[0].size)
        base = init_model(network, cfg.seed)
        encoder, pre_cfg, history = base.encoder, None, {}
    else:
        network = model.network
        encoder = nn.Sequential([nn.layer_from_dict(nn.layer_to_dict(l)) for l in model.encoder.layers])
        pre_cfg, history = model.pretrain, {k: list(v) for k, v in model.history.items()}
    x_all = _stack(corpus, network.size)

    head = None
    net = encoder
    if cfg.loss == "cross_entropy":
        head = nn.Sequential([nn.Dense(network.rep_dim, len(known), _child_rng(cfg.seed, 3))])
        net = encoder + head
    index = {k: i for i, k in enumerate(known)}
    targets = np.array([index[int(l)] for l in labels])

    adam = nn.Adam(cfg.lr)
    rng = _child_rng(cfg.seed, 4)
    history["finetune"] = []
    skipped = 0
    for epoch in range(cfg.epochs):
        total, batches = 0.0, 0
        for idx in _batches(len(labels), cfg.batch_size, rng):
            _audit(labels[idx], known_set)
            out = net.forward(x_all[idx], "train", int(rng.integers(2**63)))
            if cfg.loss == "cross_entropy":
                loss, g = nn.cross_entropy_with_grad(out, targets[idx])
            else:
                try:
                    loss, g = nn.triplet_with_grad(out, targets[idx], cfg.margin)
                except nn.DegenerateBatchError:
                    skipped += 1
                    continue
            nn.backward_and_step(net, g, adam)
            total += loss
            batches += 1
        history["finetune"].append(total / max(batches, 1))
    if skipped:
        log.info("skipped %d degenerate triplet batches", skipped)
    return TrainedModel(network, encoder, None, head, known, pre_cfg, cfg, history)


# inference ---------------------------------------------------------------------------

def embed(model: TrainedModel, samples: Sequence[AdjacencyTensor] | np.ndarray, labels=None,
          ids: Sequence[str] | None = None, batch_size: int = 256) -> RepresentationSet:
    x = _stack(samples, model.network.size)
    chunks = [model.encoder.forward(x[i:i + batch_size], "eval") for i in range(0, len(x), batch_size)]
    z = np.concatenate(chunks) if chunks else np.zeros((0, model.network.rep_dim))
    if labels is None:
        labels = np.full(len(x), UNKNOWN)
    if ids is None:
        ids = [str(i) for i in range(len(x))]
    return RepresentationSet(z, np.asarray(labels, dtype=np.int64), list(ids))


def predict_classes(model: TrainedModel, samples) -> np.ndarray:
    """Closed-set predictions from the classifier head."""
    if model.head is None:
        raise ValueError("model has no classifier head")
    x = _stack(samples, model.network.size)
    logits = (model.encoder + model.head).forward(x, "eval")
    return np.asarray(model.known_classes)[logits.argmax(axis=1)]


# persistence --------------------------------------------------------------------------

class ModelFormatError(ValueError):
    pass


def model_to_dict(model: TrainedModel) -> dict:
    layers = []
    for part in ("encoder", "decoder", "head"):
        seq = getattr(model, part)
        if seq is None:
            continue
        for layer in seq.layers:
            d = nn.layer_to_dict(layer)
            d["part"] = part
            layers.append(d)
    return {
        "format_version": FORMAT_VERSION,
        "configs": {
            "network": asdict(model.network),
            "pretrain": asdict(model.pretrain) if model.pretrain else None,
            "finetune": asdict(model.finetune) if model.finetune else None,
        },
        "known_classes": list(model.known_classes),
        "history": model.history,
        "layers": layers,
    }


def model_from_dict(d: dict) -> TrainedModel:
    version = d.get("format_version")
    if not isinstance(version, int):
        raise ModelFormatError("model file has no integer format_version")
    if version > FORMAT_VERSION:
        raise ModelFormatError(f"model format version {version} is newer than supported {FORMAT_VERSION}")
    try:
        cfgs = d["configs"]
        parts: dict[str, list[nn.Layer]] = {"encoder": [], "decoder": [], "head": []}
        for ld in d["layers"]:
            parts[ld["part"]].append(nn.layer_from_dict(ld))
        return TrainedModel(
            network=NetworkConfig(**cfgs["network"]),
            encoder=nn.Sequential(parts["encoder"]),
            decoder=nn.Sequential(parts["decoder"]) if parts["decoder"] else None,
            head=nn.Sequential(parts["head"]) if parts["head"] else None,
            known_classes=[int(k) for k in d.get("known_classes", [])],
            pretrain=PretrainConfig(**cfgs["pretrain"]) if cfgs.get("pretrain") else None,
            finetune=FinetuneConfig(**cfgs["finetune"]) if cfgs.get("finetune") else None,
            history={k: list(v) for k, v in d.get("history", {}).items()},
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc


def save_model(model: TrainedModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, sort_keys=True)


def load_model(path) -> TrainedModel:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc
    return model_from_dict(d)
