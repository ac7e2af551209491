"""LSTM caption generators: inject, merge and object-conditioned multimodal.

All three share the same word embedding, LSTM and output projection. They
differ in where the conditioning vector enters:

* inject: concatenated with the word embedding at every LSTM step;
* merge: joined with the LSTM hidden state after the recurrence, through a
  dense tanh combiner, so the LSTM sees words only;
* multimodal: the inject wiring, but conditioned on the mean of learned
  embeddings of the top-k object labels instead of the image features.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numcore as nc
from .numcore import Parameter, Tensor
from .textcorpus import END, PAD, START

INJECT, MERGE, MULTIMODAL = "inject", "merge", "multimodal"

ARCHITECTURES: dict[str, type["CaptionModel"]] = {}


class ModelError(ValueError):
    pass


class EmptySequence(ModelError):
    pass


class WrongObjectCount(ModelError):
    pass


def register_architecture(tag: str):
    def deco(cls):
        cls.architecture = tag
        ARCHITECTURES[tag] = cls
        return cls

    return deco


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 32
    hidden_dim: int = 64
    image_feat_dim: int = 2048
    object_enc_dim: int = 512
    top_k_objects: int = 5
    max_len: int = 20
    architecture: str = INJECT
    # Size of the object-label inventory; defaults to image_feat_dim because
    # labels are indices into the feature (class-score) vector.
    num_object_labels: int | None = None

    def __post_init__(self):
        dims = ("vocab_size", "embed_dim", "hidden_dim", "image_feat_dim", "object_enc_dim", "top_k_objects")
        for name in dims:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if self.num_object_labels is not None and self.num_object_labels < self.top_k_objects:
            raise ValueError("num_object_labels must be >= top_k_objects")

    @property
    def object_labels(self) -> int:
        return self.num_object_labels or self.image_feat_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LstmCellParams:
    """Fused gate weights; column blocks are ordered input, forget, output, candidate."""

    w_x: Parameter
    w_h: Parameter
    b: Parameter

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[0]

    @classmethod
    def init(cls, rng, input_dim: int, hidden_dim: int, prefix: str = "lstm") -> "LstmCellParams":
        H = hidden_dim
        w_x = np.concatenate([nc.glorot_uniform(rng, (input_dim, H)) for _ in range(4)], axis=1)
        w_h = np.concatenate([nc.glorot_uniform(rng, (H, H)) for _ in range(4)], axis=1)
        b = np.zeros(4 * H)
        b[H : 2 * H] = 1.0  # forget-gate bias
        return cls(
            Parameter(w_x, f"{prefix}.w_x"),
            Parameter(w_h, f"{prefix}.w_h"),
            Parameter(b, f"{prefix}.b"),
        )

    def parameters(self) -> list[Parameter]:
        return [self.w_x, self.w_h, self.b]


def lstm_step(x, h, c, params: LstmCellParams):
    """One LSTM update on a batch: x (B, in), h and c (B, H) -> (h', c')."""
    x, h, c = nc.as_tensor(x), nc.as_tensor(h), nc.as_tensor(c)
    H = params.hidden_dim
    if x.data.ndim != 2 or x.shape[1] != params.w_x.shape[0]:
        raise nc.ShapeMismatch("lstm_step input", x.shape, params.w_x.shape)
    if h.shape != (x.shape[0], H) or c.shape != h.shape:
        raise nc.ShapeMismatch("lstm_step state", h.shape, c.shape, (x.shape[0], H))
    z = nc.add(nc.add(nc.matmul(x, params.w_x), nc.matmul(h, params.w_h)), params.b)
    i = nc.sigmoid(z[:, 0:H])
    f = nc.sigmoid(z[:, H : 2 * H])
    o = nc.sigmoid(z[:, 2 * H : 3 * H])
    g = nc.tanh(z[:, 3 * H : 4 * H])
    c_next = nc.add(nc.mul(f, c), nc.mul(i, g))
    h_next = nc.mul(o, nc.tanh(c_next))
    return h_next, c_next


@dataclass(frozen=True)
class ParamCount:
    layers: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.layers.values())


class CaptionModel:
    """Shared embedding/LSTM/output machinery; subclasses wire the conditioning."""

    architecture = "abstract"

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.architecture != self.architecture:
            raise ModelError(f"config architecture {config.architecture!r} != {self.architecture!r}")
        self.config = config
        rng = nc.make_rng(seed)
        V, E, H = config.vocab_size, config.embed_dim, config.hidden_dim
        self.layers: dict[str, list[Parameter]] = {}
        self.embedding = self._register("embedding", Parameter(rng.uniform(-0.1, 0.1, (V, E)), "embedding"))
        self._build_conditioning(rng)
        self.lstm = LstmCellParams.init(rng, self.lstm_input_dim, H)
        self.layers["lstm"] = self.lstm.parameters()
        self._build_combiner(rng)
        out_in = self.output_input_dim
        self.out_w = self._register("output_projection", Parameter(nc.glorot_uniform(rng, (out_in, V)), "output.w"))
        self.out_b = self._register("output_projection", Parameter(np.zeros(V), "output.b"))

    # -- construction hooks

    def _register(self, layer: str, p: Parameter) -> Parameter:
        self.layers.setdefault(layer, []).append(p)
        return p

    def _build_conditioning(self, rng) -> None:
        D, E = self.conditioning_dim, self.config.embed_dim
        self.cond_w = self._register("conditioning_projection", Parameter(nc.glorot_uniform(rng, (D, E)), "cond.w"))
        self.cond_b = self._register("conditioning_projection", Parameter(np.zeros(E), "cond.b"))

    def _build_combiner(self, rng) -> None:
        pass

    @property
    def conditioning_dim(self) -> int:
        return self.config.image_feat_dim

    @property
    def lstm_input_dim(self) -> int:
        return 2 * self.config.embed_dim

    @property
    def output_input_dim(self) -> int:
        return self.config.hidden_dim

    # -- parameters

    def parameters(self) -> list[Parameter]:
        return [p for ps in self.layers.values() for p in ps]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            raise ModelError(f"checkpoint parameters {sorted(state)} do not match model {sorted(params)}")
        for name, value in state.items():
            if value.shape != params[name].shape:
                raise nc.ShapeMismatch(f"load {name}", value.shape, params[name].shape)
            params[name].data = np.array(value, dtype=np.float64, copy=True)

    # -- computation

    def prepare_conditioning(self, conditioning) -> np.ndarray:
        """Validate and batch raw conditioning input (features or label ids)."""
        x = np.asarray(conditioning, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.conditioning_dim:
            raise nc.ShapeMismatch("conditioning", x.shape, (None, self.conditioning_dim))
        return x

    def encode_conditioning(self, conditioning) -> Tensor:
        x = self.prepare_conditioning(conditioning)
        return nc.linear(x, self.cond_w, self.cond_b)

    def initial_state(self, batch: int):
        H = self.config.hidden_dim
        return Tensor(np.zeros((batch, H))), Tensor(np.zeros((batch, H)))

    def step(self, cond: Tensor, token_ids, state):
        """Consume one token per batch row; return (output features, new state)."""
        emb = nc.embedding_lookup(self.embedding, token_ids)
        h, c = lstm_step(nc.concat([cond, emb], axis=1), state[0], state[1], self.lstm)
        return h, (h, c)

    def project(self, feats: Tensor) -> Tensor:
        return nc.linear(feats, self.out_w, self.out_b)

    def forward(self, conditioning, token_ids, return_states: bool = False):
        """Teacher-forced logits for a batch.

        ``token_ids`` is (B, T) (or (T,) for a single sequence). Returns a
        (T*B, V) tensor in time-major order: row ``t*B + b`` holds the
        next-token logits after reading ``token_ids[b, :t+1]``.
        """
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.shape[1] == 0:
            raise EmptySequence("token sequence is empty")
        cond = self.encode_conditioning(conditioning)
        if cond.shape[0] != ids.shape[0]:
            raise nc.ShapeMismatch("forward batch", cond.shape, ids.shape)
        state = self.initial_state(ids.shape[0])
        outs, states = [], []
        for t in range(ids.shape[1]):
            feats, state = self.step(cond, ids[:, t], state)
            outs.append(feats)
            if return_states:
                states.append((state[0].data.copy(), state[1].data.copy()))
        logits = self.project(nc.concat(outs, axis=0))
        return (logits, states) if return_states else logits

    def loss(self, conditioning, token_ids, ignore_index: int | None = 0) -> Tensor:
        """Mean next-token cross-entropy; targets are ``token_ids`` shifted left."""
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        logits = self.forward(conditioning, ids[:, :-1])
        targets = ids[:, 1:].T.reshape(-1)
        return nc.cross_entropy(logits, targets, ignore_index=ignore_index)


@register_architecture(INJECT)
class InjectModel(CaptionModel):
    pass


@register_architecture(MERGE)
class MergeModel(CaptionModel):
    def _build_combiner(self, rng) -> None:
        H, E = self.config.hidden_dim, self.config.embed_dim
        self.merge_w = self._register("merge_combiner", Parameter(nc.glorot_uniform(rng, (H + E, H)), "merge.w"))
        self.merge_b = self._register("merge_combiner", Parameter(np.zeros(H), "merge.b"))

    @property
    def lstm_input_dim(self) -> int:
        return self.config.embed_dim

    def step(self, cond: Tensor, token_ids, state):
        emb = nc.embedding_lookup(self.embedding, token_ids)
        h, c = lstm_step(emb, state[0], state[1], self.lstm)
        merged = nc.tanh(nc.linear(nc.concat([h, cond], axis=1), self.merge_w, self.merge_b))
        return merged, (h, c)


@register_architecture(MULTIMODAL)
class MultiModalModel(CaptionModel):
    def _build_conditioning(self, rng) -> None:
        L, D = self.config.object_labels, self.config.object_enc_dim
        self.object_embedding = self._register(
            "object_embedding", Parameter(rng.uniform(-0.1, 0.1, (L, D)), "objects.embedding")
        )
        super()._build_conditioning(rng)

    @property
    def conditioning_dim(self) -> int:
        return self.config.object_enc_dim

    def prepare_conditioning(self, conditioning) -> np.ndarray:
        labels = np.asarray(conditioning, dtype=np.int64)
        if labels.ndim == 1:
            labels = labels[None, :]
        if labels.ndim != 2 or labels.shape[1] != self.config.top_k_objects:
            raise WrongObjectCount(
                f"expected {self.config.top_k_objects} object labels per image, got shape {labels.shape}"
            )
        return labels

    def object_encoding(self, conditioning) -> Tensor:
        labels = self.prepare_conditioning(conditioning)
        return nc.mean(nc.embedding_lookup(self.object_embedding, labels), axis=1)

    def encode_conditioning(self, conditioning) -> Tensor:
        return nc.linear(self.object_encoding(conditioning), self.cond_w, self.cond_b)


def build_model(config: ModelConfig, seed: int = 0) -> CaptionModel:
    try:
        cls = ARCHITECTURES[config.architecture]
    except KeyError:
        raise ModelError(f"unknown architecture {config.architecture!r}; known: {sorted(ARCHITECTURES)}") from None
    return cls(config, seed)


def forward_inject(model: InjectModel, image_feat, token_ids) -> Tensor:
    return _checked_forward(model, InjectModel, image_feat, token_ids)


def forward_merge(model: MergeModel, image_feat, token_ids) -> Tensor:
    """Per-prefix logits; the last row is the next-word distribution."""
    return _checked_forward(model, MergeModel, image_feat, token_ids)


def forward_multimodal(model: MultiModalModel, object_label_ids, token_ids) -> Tensor:
    return _checked_forward(model, MultiModalModel, object_label_ids, token_ids)


def _checked_forward(model, cls, conditioning, token_ids):
    if not isinstance(model, cls):
        raise ModelError(f"expected a {cls.architecture} model, got {model.architecture}")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise EmptySequence("token sequence is empty")
    if ids.reshape(-1)[0] != START:
        raise ModelError("token sequence must begin with START")
    return model.forward(conditioning, ids)


def decode_greedy_batch(model: CaptionModel, conditioning, max_len: int | None = None) -> list[list[int]]:
    """Argmax decoding from START until END or ``max_len`` generated tokens."""
    max_len = model.config.max_len if max_len is None else max_len
    with nc.no_grad():
        cond = model.encode_conditioning(conditioning)
        B = cond.shape[0]
        state = model.initial_state(B)
        tokens = np.full(B, START, dtype=np.int64)
        out: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            feats, state = model.step(cond, tokens, state)
            tokens = np.argmax(model.project(feats).data, axis=1)
            for b in range(B):
                if done[b]:
                    continue
                if tokens[b] == END:
                    done[b] = True
                elif tokens[b] not in (START, PAD):
                    out[b].append(int(tokens[b]))
            if done.all():
                break
    return out


def decode_greedy(model: CaptionModel, conditioning, max_len: int | None = None, vocab=None):
    """Decode one caption; returns token strings when ``vocab`` is given, else ids."""
    ids = decode_greedy_batch(model, conditioning, max_len)[0]
    if vocab is None:
        return ids
    return [vocab.id_to_token[i] for i in ids]


def count_params(model: CaptionModel) -> ParamCount:
    return ParamCount({layer: sum(p.data.size for p in ps) for layer, ps in model.layers.items()})


def closed_form_param_count(config: ModelConfig) -> ParamCount:
    V, E, H = config.vocab_size, config.embed_dim, config.hidden_dim
    arch = config.architecture
    layers = {"embedding": V * E}
    if arch == MULTIMODAL:
        layers["object_embedding"] = config.object_labels * config.object_enc_dim
        layers["conditioning_projection"] = (config.object_enc_dim + 1) * E
    else:
        layers["conditioning_projection"] = (config.image_feat_dim + 1) * E
    lstm_in = E if arch == MERGE else 2 * E
    layers["lstm"] = 4 * H * (lstm_in + H + 1)
    if arch == MERGE:
        layers["merge_combiner"] = (H + E + 1) * H
    layers["output_projection"] = (H + 1) * V
    return ParamCount(layers)


# ----------------------------------------------------------- persistence

MANIFEST_FORMAT = "capkit-model"


def save_model(model: CaptionModel, directory, vocab, *, seed: int | None = None) -> Path:
    """Write checkpoint.json, vocab.tsv and model.json into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nc.save_checkpoint(model.state_dict(), directory / "checkpoint.json")
    vocab.save(directory / "vocab.tsv")
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "architecture": model.architecture,
        "config": model.config.to_dict(),
        "checkpoint": "checkpoint.json",
        "vocab": "vocab.tsv",
        "vocab_sha256": vocab.content_hash(),
        "seed": seed,
    }
    path = directory / "model.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8", newline="\n")
    return path


class VocabMismatch(ModelError):
    pass


def load_model(path):
    """Load a model manifest (file or its directory); returns (model, vocab)."""
    from .textcorpus import Vocabulary

    path = Path(path)
    if path.is_dir():
        path = path / "model.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ModelError(f"{path}: not a model manifest")
    config = ModelConfig.from_dict(manifest["config"])
    vocab = Vocabulary.load(path.parent / manifest["vocab"])
    if vocab.content_hash() != manifest["vocab_sha256"]:
        raise VocabMismatch(f"{path}: vocabulary hash does not match the manifest")
    if len(vocab) != config.vocab_size:
        raise VocabMismatch(f"{path}: vocabulary size {len(vocab)} != model vocab_size {config.vocab_size}")
    model = build_model(config)
    model.load_state_dict(nc.load_checkpoint(path.parent / manifest["checkpoint"]))
    return model, vocab
