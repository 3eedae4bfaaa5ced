"""The recognizer network and its checkpoint format.

Three cooperating pieces over a shared encoder:

* a bidirectional LSTM encoder with per-layer linear projections
  (tanh-squashed), producing one state per input frame;
* a location-aware attention decoder: attention energies condition on
  the previous step's attention weights through a 1-d convolution, the
  decoder LSTM consumes [label embedding; attention context];
* a CTC head (projection + tanh + output layer) emitting per-frame
  log posteriors over vocabulary + blank.

Parameters are addressed by dotted names whose first component is the
group used for freezing and reinitialization: encoder, attention,
decoder, out (embedding + output softmax), ctc_internal, ctc_out.

Checkpoints: magic ``S2SM``, version u32, length-prefixed config blob
of key=value lines, vocabulary entry count + length-prefixed entries,
then named float64 tensors.  Loading rebuilds the model and verifies
every tensor's shape against the config and vocabulary.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import data as dataio
from .vocab import Vocabulary

S2SM_MAGIC = b"S2SM"
S2SM_VERSION = 1

GROUPS = ("encoder", "attention", "decoder", "out", "ctc_internal", "ctc_out")


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int
    enc_layers: int = 2
    enc_hidden: int = 32
    enc_proj: int = 32
    att_dim: int = 32
    att_channels: int = 10
    att_width: int = 5
    dec_hidden: int = 32
    emb_dim: int = 16
    ctc_dim: int = 32

    def __post_init__(self):
        if self.att_width % 2 != 1:
            raise ValueError("attention convolution width must be odd")
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_strings(cls, d):
        kwargs = {f.name: int(d[f.name]) for f in fields(cls)}
        return cls(**kwargs)


class ModelParams:
    """Named parameter tensors plus the vocabulary they are sized for."""

    def __init__(self, config, vocab, tensors):
        self.config = config
        self.vocab = vocab
        self.tensors = dict(tensors)
        expect = _expected_shapes(config, vocab.size)
        if set(self.tensors) != set(expect):
            missing = set(expect) - set(self.tensors)
            extra = set(self.tensors) - set(expect)
            raise ValueError(f"tensor set mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expect.items():
            got = self.tensors[name].value.shape
            if got != shape:
                raise ValueError(f"{name}: shape {got} does not match config/vocab {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def group(self, group):
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        return [self.tensors[n] for n in self.names() if n.split(".", 1)[0] == group]

    def group_names(self, group):
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        return [n for n in self.names() if n.split(".", 1)[0] == group]

    def all_params(self):
        return [self.tensors[n] for n in self.names()]

    def enc_lstms(self, layer):
        p = self.tensors
        fwd = ad.LstmParams(p[f"encoder.l{layer}.fwd.w"], p[f"encoder.l{layer}.fwd.b"])
        bwd = ad.LstmParams(p[f"encoder.l{layer}.bwd.w"], p[f"encoder.l{layer}.bwd.b"])
        return fwd, bwd

    def dec_lstm(self):
        return ad.LstmParams(self.tensors["decoder.lstm.w"], self.tensors["decoder.lstm.b"])

    def snapshot(self):
        """Name -> copied value array, for bit-identity comparisons."""
        return {n: t.value.copy() for n, t in self.tensors.items()}


def _expected_shapes(cfg, vocab_size):
    V = vocab_size
    shapes = {}
    in_dim = cfg.feat_dim
    for layer in range(cfg.enc_layers):
        shapes[f"encoder.l{layer}.fwd.w"] = (4 * cfg.enc_hidden, in_dim + cfg.enc_hidden)
        shapes[f"encoder.l{layer}.fwd.b"] = (4 * cfg.enc_hidden,)
        shapes[f"encoder.l{layer}.bwd.w"] = (4 * cfg.enc_hidden, in_dim + cfg.enc_hidden)
        shapes[f"encoder.l{layer}.bwd.b"] = (4 * cfg.enc_hidden,)
        shapes[f"encoder.l{layer}.proj.w"] = (cfg.enc_proj, 2 * cfg.enc_hidden)
        shapes[f"encoder.l{layer}.proj.b"] = (cfg.enc_proj,)
        in_dim = cfg.enc_proj
    shapes["attention.conv"] = (cfg.att_channels, cfg.att_width)
    shapes["attention.wq"] = (cfg.att_dim, cfg.dec_hidden)
    shapes["attention.wh"] = (cfg.att_dim, cfg.enc_proj)
    shapes["attention.wf"] = (cfg.att_dim, cfg.att_channels)
    shapes["attention.bf"] = (cfg.att_dim,)
    shapes["attention.g"] = (cfg.att_dim,)
    shapes["decoder.lstm.w"] = (4 * cfg.dec_hidden, cfg.emb_dim + cfg.enc_proj + cfg.dec_hidden)
    shapes["decoder.lstm.b"] = (4 * cfg.dec_hidden,)
    shapes["out.embed"] = (V, cfg.emb_dim)
    shapes["out.w"] = (V, cfg.dec_hidden)
    shapes["out.b"] = (V,)
    shapes["ctc_internal.w"] = (cfg.ctc_dim, cfg.enc_proj)
    shapes["ctc_internal.b"] = (cfg.ctc_dim,)
    shapes["ctc_out.w"] = (V + 1, cfg.ctc_dim)
    shapes["ctc_out.b"] = (V + 1,)
    return shapes


def init_group_tensors(config, vocab_size, group, rng):
    """Freshly initialized tensors for one group (biases zero).

    Weights are fan-scaled uniform; a fixed small range starves the
    recurrent stack and SGD never leaves the all-blank plateau.
    """
    out = {}
    for name, shape in sorted(_expected_shapes(config, vocab_size).items()):
        if name.split(".", 1)[0] != group:
            continue
        if name.endswith(".b") or name == "attention.bf":
            value = np.zeros(shape)
        else:
            if len(shape) == 2:
                scale = np.sqrt(6.0 / (shape[0] + shape[1]))
            else:
                scale = np.sqrt(3.0 / shape[0])
            value = ad.uniform_init(rng, shape, scale)
        out[name] = ad.parameter(value, name=name)
    return out


def init_model(config, vocab, seed=0):
    """Build a freshly initialized model; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for group in GROUPS:
        tensors.update(init_group_tensors(config, vocab.size, group, rng))
    return ModelParams(config, vocab, tensors)


# ------------------------------------------------------------------ forward

def encode(params, feats):
    """Feature matrix (T, feat_dim) -> encoder state Tensor (T, enc_proj)."""
    feats = np.asarray(feats, dtype=np.float64)
    cfg = params.config
    if feats.ndim != 2 or feats.shape[1] != cfg.feat_dim:
        raise ad.ShapeError(f"encode: features {feats.shape} do not match feat_dim {cfg.feat_dim}")
    if feats.shape[0] < 1:
        raise ad.ShapeError("encode: empty feature sequence")
    T = feats.shape[0]
    x_rows = [ad.constant(feats[t]) for t in range(T)]
    for layer in range(cfg.enc_layers):
        fwd, bwd = params.enc_lstms(layer)
        H = cfg.enc_hidden
        h = ad.constant(np.zeros(H))
        c = ad.constant(np.zeros(H))
        hf = []
        for t in range(T):
            h, c = ad.lstm_step(fwd, x_rows[t], (h, c))
            hf.append(h)
        h = ad.constant(np.zeros(H))
        c = ad.constant(np.zeros(H))
        hb = [None] * T
        for t in range(T - 1, -1, -1):
            h, c = ad.lstm_step(bwd, x_rows[t], (h, c))
            hb[t] = h
        cat = ad.stack_rows([ad.concat([hf[t], hb[t]]) for t in range(T)])
        proj = ad.tanh(ad.affine(cat, params[f"encoder.l{layer}.proj.w"],
                                 params[f"encoder.l{layer}.proj.b"]))
        x_rows = [ad.row(proj, t) for t in range(T)]
    return proj


def initial_attention(T):
    """Uniform weights; keeps the location convolution defined at step 1."""
    return ad.constant(np.full(T, 1.0 / T))


def precompute_enc_attention(params, enc):
    """Encoder-side attention projection, computed once per utterance."""
    return ad.linear(enc, params["attention.wh"])


def attend(params, a_prev, q_prev, enc, enc_att=None):
    """One attention step: (weights over T, context vector).

    a_prev: previous attention weights (T,); q_prev: decoder hidden
    state; enc: encoder states (T, enc_proj).
    """
    if a_prev.value.shape[0] != enc.value.shape[0]:
        raise ad.ShapeError(
            f"attend: weights {a_prev.shape} vs encoder states {enc.shape}")
    if enc_att is None:
        enc_att = precompute_enc_attention(params, enc)
    f = ad.conv1d(a_prev, params["attention.conv"])           # (T, channels)
    e = ad.matvec(
        ad.tanh(
            ad.add(
                ad.add(enc_att, ad.linear(f, params["attention.wf"])),
                ad.add(ad.matvec(params["attention.wq"], q_prev), params["attention.bf"]),
            )
        ),
        params["attention.g"],
    )
    a = ad.softmax(e)
    r = ad.weighted_sum(a, enc)
    return a, r


def initial_decoder_state(params):
    H = params.config.dec_hidden
    return ad.constant(np.zeros(H)), ad.constant(np.zeros(H))


def decode_step(params, r, state, label_prev):
    """One decoder step -> (log distribution over vocabulary, new state)."""
    V = params.vocab.size
    if not 0 <= label_prev < V:
        raise ValueError(f"label id {label_prev} outside vocabulary of {V}")
    emb = ad.row(params["out.embed"], int(label_prev))
    x = ad.concat([emb, r])
    h, c = ad.lstm_step(params.dec_lstm(), x, state)
    logits = ad.affine(h, params["out.w"], params["out.b"])
    return ad.log_softmax(logits), (h, c)


def ctc_head(params, enc):
    """Encoder states -> (T, V+1) log posteriors, blank last."""
    hidden = ad.tanh(ad.affine(enc, params["ctc_internal.w"], params["ctc_internal.b"]))
    logits = ad.affine(hidden, params["ctc_out.w"], params["ctc_out.b"])
    return ad.log_softmax(logits)


def attention_nll(params, enc, labels, enc_att=None):
    """Teacher-forced negative log-likelihood of labels + eos (scalar node)."""
    labels = np.asarray(labels, dtype=np.int64)
    eos = params.vocab.eos_id
    T = enc.value.shape[0]
    if enc_att is None:
        enc_att = precompute_enc_attention(params, enc)
    a = initial_attention(T)
    state = initial_decoder_state(params)
    prev = eos  # doubles as the start symbol
    terms = []
    for y in list(labels) + [eos]:
        att_a, r = attend(params, a, state[0], enc, enc_att)
        dist, state = decode_step(params, r, state, prev)
        terms.append(ad.pick(dist, int(y)))
        a = att_a
        prev = int(y)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, -1.0)


# -------------------------------------------------------------- checkpoints

def save_model(path, params):
    with open(path, "wb") as f:
        f.write(S2SM_MAGIC)
        dataio._write_u32(f, S2SM_VERSION)
        dataio.write_config_blob(f, params.config.as_dict())
        entries = params.vocab.to_entries()
        dataio._write_u32(f, len(entries))
        for e in entries:
            dataio._write_str(f, e)
        dataio.write_tensors(f, [(n, params[n].value) for n in params.names()])


def load_model(path):
    with open(path, "rb") as f:
        if f.read(4) != S2SM_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version = dataio._read_u32(f)
        if version != S2SM_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig.from_strings(dataio.read_config_blob(f))
        n = dataio._read_u32(f)
        vocab = Vocabulary.from_serialized_entries(
            [dataio._read_str(f) for _ in range(n)])
        raw = dataio.read_tensors(f)
    tensors = {name: ad.parameter(arr, name=name) for name, arr in raw.items()}
    # ModelParams validates every shape against config and vocabulary
    return ModelParams(config, vocab, tensors)
