"""Two-stage stacked bottleneck feature extractor.

Stage 1 reads the 222-d windowed-DCT input, stage 2 reads 21 stacked,
5x-downsampled stage-1 bottleneck frames (1680-d).  Each stage is a
sigmoid MLP whose last hidden layer is the linear bottleneck; training
targets are per-frame phone states behind a block-softmax output: one
independent softmax block per language, so an utterance only ever
touches its own language's output tensors and every other block's
gradient is exactly zero.

Training runs in two phases: stage-1 pretraining on full-rate frames,
then joint fine-tuning of both stages through the stacking at the
downsampled rate.  Extraction keeps the downsampled rate: (T, 37) raw
features become (ceil(T/5), 30).

Checkpoints: magic ``SBNP``, version u32, config blob, named float64
tensors (same primitives as the recognizer checkpoint).
"""

from dataclasses import fields

import numpy as np

from . import autodiff as ad
from . import data as dataio
from . import features as feat
from . import optim

SBNP_MAGIC = b"SBNP"
SBNP_VERSION = 1


def _stage_dims(config, stage):
    if stage == 1:
        return config.stage1_in, config.bn1_dim
    return config.stage2_in, config.bn2_dim


def _expected_shapes(config, phone_counts):
    shapes = {}
    for stage in (1, 2):
        in_dim, bn_dim = _stage_dims(config, stage)
        d = in_dim
        for i in range(config.hidden_layers):
            shapes[f"s{stage}.h{i}.w"] = (config.hidden_dim, d)
            shapes[f"s{stage}.h{i}.b"] = (config.hidden_dim,)
            d = config.hidden_dim
        shapes[f"s{stage}.bn.w"] = (bn_dim, d)
        shapes[f"s{stage}.bn.b"] = (bn_dim,)
        for lang in sorted(phone_counts):
            shapes[f"s{stage}.out.{lang}.w"] = (phone_counts[lang], bn_dim)
            shapes[f"s{stage}.out.{lang}.b"] = (phone_counts[lang],)
    return shapes


class SbnParams:
    def __init__(self, config, phone_counts, tensors):
        for lang in phone_counts:
            if "." in lang or "=" in lang or not lang:
                raise ValueError(f"bad language id {lang!r}")
        self.config = config
        self.phone_counts = dict(phone_counts)
        self.tensors = dict(tensors)
        expect = _expected_shapes(config, phone_counts)
        if set(self.tensors) != set(expect):
            missing = sorted(set(expect) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expect))
            raise ValueError(f"tensor set mismatch: missing {missing}, extra {extra}")
        for name, shape in expect.items():
            if self.tensors[name].value.shape != shape:
                raise ValueError(f"{name}: shape {self.tensors[name].value.shape} != {shape}")

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def all_params(self):
        return [self.tensors[n] for n in self.names()]

    def stage_params(self, stage):
        return [self.tensors[n] for n in self.names() if n.startswith(f"s{stage}.")]

    @property
    def languages(self):
        return sorted(self.phone_counts)


def init_sbn(config, phone_counts, seed=0):
    # fan-scaled bands; the sigmoid layers get the usual 4x widening,
    # otherwise three of them in a row starve the bottleneck of signal
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in sorted(_expected_shapes(config, phone_counts).items()):
        if name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_out, fan_in = shape
            scale = np.sqrt(6.0 / (fan_in + fan_out))
            if ".h" in name:
                scale *= 4.0
            value = rng.uniform(-scale, scale, shape)
        tensors[name] = ad.parameter(value, name=name)
    return SbnParams(config, phone_counts, tensors)


# ------------------------------------------------------------------ forward

def _stage_bn(params, stage, x):
    """x: (T, in_dim) Tensor or array -> linear bottleneck Tensor."""
    if not isinstance(x, ad.Tensor):
        x = ad.constant(np.asarray(x, dtype=np.float64))
    h = x
    for i in range(params.config.hidden_layers):
        h = ad.sigmoid(ad.affine(h, params[f"s{stage}.h{i}.w"], params[f"s{stage}.h{i}.b"]))
    return ad.affine(h, params[f"s{stage}.bn.w"], params[f"s{stage}.bn.b"])


def stage1_bn(params, stage1_in):
    return _stage_bn(params, 1, stage1_in)


def stage2_bn(params, stacked):
    return _stage_bn(params, 2, stacked)


def block_logprobs(params, stage, bn, language):
    """Per-frame log posteriors of the language's phone-state block."""
    if language not in params.phone_counts:
        raise KeyError(f"language {language!r} has no output block "
                       f"(known: {params.languages})")
    logits = ad.affine(bn, params[f"s{stage}.out.{language}.w"],
                       params[f"s{stage}.out.{language}.b"])
    return ad.log_softmax(logits)


def _stack_in_graph(bn1, T):
    """Differentiable version of the 21-frame stack at stride 5."""
    idx = feat.window_indices(T, feat.STAGE2_WINDOW, feat.STAGE2_STRIDE)
    flat = ad.gather_rows(bn1, idx.reshape(-1))
    return ad.reshape(flat, (idx.shape[0], feat.STAGE2_WINDOW * bn1.value.shape[1])), idx[:, feat.STAGE2_WINDOW // 2]


def extract_sbn(raw, params):
    """(T, 37) raw features -> (ceil(T/5), 30) bottleneck features."""
    raw = np.asarray(raw, dtype=np.float64)
    s1 = feat.stage1_input(raw)
    bn1 = stage1_bn(params, s1)
    stacked = feat.stack_downsample(bn1.value)
    return stage2_bn(params, stacked).value


def _frame_nll(params, stage, bn, language, targets):
    lp = block_logprobs(params, stage, bn, language)
    K = params.phone_counts[language]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= K):
        raise ValueError(f"phone label outside {language!r} inventory of {K}")
    picked = ad.pick_rows(lp, targets)
    return ad.scale(ad.sum_all(picked), -1.0 / max(len(targets), 1))


def train_sbn(utterances, config, seed=0):
    """Returns (params, per-epoch mean losses).

    utterances need 37-d features and per-frame phone labels; the caller
    is responsible for any mean normalization of the raw features.
    """
    utts = list(utterances)
    if not utts:
        raise ValueError("no training utterances")
    phone_counts = {}
    for u in utts:
        if u.phone_labels is None:
            raise ValueError(f"{u.utt_id}: missing phone labels")
        top = int(u.phone_labels.max()) + 1 if u.phone_labels.size else 0
        phone_counts[u.language] = max(phone_counts.get(u.language, 0), top)
    params = init_sbn(config, phone_counts, seed=seed)

    prepared = [(feat.stage1_input(u.features), u.language, u.phone_labels) for u in utts]
    trace = []

    stage1 = params.stage_params(1)
    for order in optim.epoch_orders(len(prepared), config.stage1_epochs, seed + 1):
        losses = []
        for i in order:
            s1, lang, labels = prepared[i]
            loss = _frame_nll(params, 1, stage1_bn(params, s1), lang, labels)
            ad.backward(loss, stage1)
            optim.clip_gradients(stage1, config.clip_norm)
            optim.sgd_step(stage1, config.learn_rate)
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))

    everything = params.all_params()
    orders = optim.epoch_orders(len(prepared), config.joint_epochs, seed + 2)
    for epoch, order in enumerate(orders):
        lr = config.learn_rate * config.joint_decay**epoch
        losses = []
        for i in order:
            s1, lang, labels = prepared[i]
            bn1 = stage1_bn(params, s1)
            stacked, centers = _stack_in_graph(bn1, s1.shape[0])
            loss = _frame_nll(params, 2, stage2_bn(params, stacked), lang, labels[centers])
            ad.backward(loss, everything)
            optim.clip_gradients(everything, config.clip_norm)
            optim.sgd_step(everything, lr)
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))
    return params, trace


def phone_accuracy(params, utterances):
    """Stage-2 frame accuracy at the downsampled rate."""
    hit = total = 0
    for u in utterances:
        s1 = feat.stage1_input(u.features)
        bn1 = stage1_bn(params, s1)
        stacked, centers = _stack_in_graph(bn1, s1.shape[0])
        lp = block_logprobs(params, 2, stage2_bn(params, stacked), u.language)
        pred = lp.value.argmax(axis=1)
        hit += int(np.sum(pred == u.phone_labels[centers]))
        total += len(centers)
    return hit / max(total, 1)


# -------------------------------------------------------------- checkpoints

def save_sbn(path, params):
    cfg = {f.name: getattr(params.config, f.name) for f in fields(params.config)}
    cfg["languages"] = ",".join(params.languages)
    for lang in params.languages:
        cfg[f"phones.{lang}"] = params.phone_counts[lang]
    with open(path, "wb") as f:
        f.write(SBNP_MAGIC)
        dataio._write_u32(f, SBNP_VERSION)
        dataio.write_config_blob(f, cfg)
        dataio.write_tensors(f, [(n, params[n].value) for n in params.names()])


def load_sbn(path):
    with open(path, "rb") as f:
        if f.read(4) != SBNP_MAGIC:
            raise ValueError(f"{path}: not a bottleneck checkpoint")
        version = dataio._read_u32(f)
        if version != SBNP_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        blob = dataio.read_config_blob(f)
        raw = dataio.read_tensors(f)
    langs = [l for l in blob.pop("languages").split(",") if l]
    phone_counts = {l: int(blob.pop(f"phones.{l}")) for l in langs}
    defaults = feat.SbnConfig()
    kwargs = {f_.name: type(getattr(defaults, f_.name))(blob[f_.name])
              for f_ in fields(feat.SbnConfig)}
    config = feat.SbnConfig(**kwargs)
    tensors = {name: ad.parameter(arr, name=name) for name, arr in raw.items()}
    return SbnParams(config, phone_counts, tensors)
