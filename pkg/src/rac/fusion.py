"""Two-branch model: trainable base head fused with the retrieval branch.

The fused score is the scaled sum of the unit-normalized branch logits,
f = s * (f_ret/||f_ret|| + f_base/||f_base||) with s defaulting to L/2, so
neither branch can dominate by magnitude alone. Both branches train jointly
under one adjusted cross-entropy; disabling a branch reproduces the
corresponding single-branch baseline bit for bit under the same seed.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .ann import HnswParams, KeyStore, build_exact, build_hnsw
from .autodiff import (
    OptimState,
    ParamTensor,
    adamw_step,
    affine_backward,
    affine_forward,
    normalize_forward,
    normalize_grad,
    sgd_step,
)
from .dataspace import ClassStats, Dataset, bucketize
from .errors import ValidationError
from .losses import (
    Logits,
    LossSpec,
    adjusted_ce,
    bucket_accuracy,
    make_loss_spec,
    per_class_accuracy,
    predictions_from_logits,
)
from .retrieval import (
    FrozenEncoder,
    RetrievalBranch,
    RetrievalConfig,
    TextEncoder,
    TextEncoderSpec,
    TextStore,
    Tokenizer,
    assemble_text,
    build_vocabulary,
    default_spec,
    pad_batch,
)

EPS_NORM = 1e-12
MOVING_AVG_WINDOW = 20

OPTIMIZERS = ("adamw", "sgd")
ABLATION_MODES = ("subsample_fraction", "per_class_cap", "class_count")

# Seed-stream tags keep the independent draws (head init, epoch shuffling)
# from colliding with each other or with the text encoder's [seed, 7001].
_BASE_INIT_TAG = 3301
_SHUFFLE_TAG = 4201
_ABLATION_TAG = 977


# ---------------------------------------------------------------------------
# Fusion of branch logits
# ---------------------------------------------------------------------------


class FuseCache(NamedTuple):
    ret_values: np.ndarray
    base_values: np.ndarray
    scale: float
    eps_norm: float


def _values_of(logits) -> np.ndarray:
    return logits.values if isinstance(logits, Logits) else np.asarray(logits, dtype=np.float64)


def fuse(f_ret, f_base, scale: float | None = None, eps_norm: float = EPS_NORM):
    """Scaled sum of unit-normalized branch logits.

    scale=None uses L/2, making two aligned branches reproduce a vector of
    norm L. Norms are floored at eps_norm so all-zero logits (possible at
    initialization) stay finite. Returns (fused Logits, cache for backward).
    """
    r = _values_of(f_ret)
    b = _values_of(f_base)
    if r.ndim == 1:
        r = r[None, :]
    if b.ndim == 1:
        b = b[None, :]
    if r.shape != b.shape:
        raise ValidationError(f"branch logits disagree on shape: {r.shape} vs {b.shape}")
    if scale is None:
        scale = r.shape[1] / 2.0
    if scale <= 0:
        raise ValidationError("fusion scale must be positive")
    fused = scale * (normalize_forward(r, eps_norm) + normalize_forward(b, eps_norm))
    return Logits(fused, branch="fused"), FuseCache(r, b, float(scale), eps_norm)


def fuse_backward(cache: FuseCache, upstream: np.ndarray):
    """Gradients to (f_ret, f_base): each passes through its own normalizer."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.ndim == 1:
        upstream = upstream[None, :]
    g_ret = cache.scale * normalize_grad(cache.ret_values, upstream, cache.eps_norm)
    g_base = cache.scale * normalize_grad(cache.base_values, upstream, cache.eps_norm)
    return g_ret, g_base


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class RacModel:
    """Base affine head plus optional retrieval branch; either may be absent.

    With both present the model output is the fused logits; with one branch
    the output is that branch's raw logits, so single-branch baselines are
    the same code path as a disabled branch.
    """

    num_classes: int
    base_W: ParamTensor | None  # (D, L)
    base_b: ParamTensor | None  # (L,)
    retrieval: RetrievalBranch | None
    fusion_scale: float
    eps_norm: float = EPS_NORM

    def __post_init__(self):
        if self.base_W is None and self.retrieval is None:
            raise ValidationError("model needs at least one branch")
        if (self.base_W is None) != (self.base_b is None):
            raise ValidationError("base weight and bias must be present together")
        if self.fusion_scale <= 0:
            raise ValidationError("fusion scale must be positive")

    @property
    def has_base(self) -> bool:
        return self.base_W is not None

    @property
    def has_retrieval(self) -> bool:
        return self.retrieval is not None

    def parameters(self) -> list[ParamTensor]:
        """Trainable tensors in a fixed order (checkpoint/optimizer layout)."""
        params: list[ParamTensor] = []
        if self.has_base:
            params += [self.base_W, self.base_b]
        if self.has_retrieval:
            params += self.retrieval.text_encoder.parameters()
        return params

    def forward(self, features: np.ndarray, training: bool = False,
                tokens: np.ndarray | None = None) -> "ModelOutput":
        """Model output plus the branch values and caches backward() needs.

        tokens, when given, replace the retrieval lookup for this batch
        (training loops pass cached lookups; values are identical either way).
        """
        features = np.asarray(features, dtype=np.float64)
        base_vals = None
        ret_vals = None
        ret_cache = None
        if self.has_base:
            if features.shape[1] != self.base_W.values.shape[0]:
                raise ValidationError(
                    f"features have dimension {features.shape[1]}, "
                    f"base head expects {self.base_W.values.shape[0]}"
                )
            base_vals = affine_forward(features, self.base_W.values, self.base_b.values)
        if self.has_retrieval:
            if tokens is None:
                tokens = self.retrieval.token_batch(features, training)
            ret_logits, ret_cache = self.retrieval.text_encoder.forward(tokens)
            ret_vals = ret_logits.values
        if base_vals is not None and ret_vals is not None:
            out, fuse_cache = fuse(ret_vals, base_vals, self.fusion_scale, self.eps_norm)
        elif base_vals is not None:
            out, fuse_cache = Logits(base_vals, branch="base"), None
        else:
            out, fuse_cache = Logits(ret_vals, branch="ret"), None
        return ModelOutput(out, base_vals, ret_vals, features, ret_cache, fuse_cache)

    def backward(self, output: "ModelOutput", upstream: np.ndarray):
        """Accumulate parameter gradients for d(loss)/d(output.out)."""
        if output.fuse_cache is not None:
            g_ret, g_base = fuse_backward(output.fuse_cache, upstream)
        elif output.base_values is not None:
            g_ret, g_base = None, np.asarray(upstream, dtype=np.float64)
        else:
            g_ret, g_base = np.asarray(upstream, dtype=np.float64), None
        if g_base is not None:
            _, g_w, g_b = affine_backward(output.features, self.base_W.values, g_base)
            self.base_W.accumulate(g_w)
            self.base_b.accumulate(g_b)
        if g_ret is not None:
            self.retrieval.text_encoder.backward(output.ret_cache, g_ret)


@dataclass
class ModelOutput:
    out: Logits
    base_values: np.ndarray | None
    ret_values: np.ndarray | None
    features: np.ndarray
    ret_cache: tuple | None
    fuse_cache: FuseCache | None


# ---------------------------------------------------------------------------
# Training configuration and model assembly
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Everything a training run needs beyond the data and index artifacts."""

    loss: str = "lace"
    reweight: str = "none"
    tau: float = 1.0
    epsilon: float = 0.1
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    k: int = 30
    drop_first: bool = False
    encoder_kind: str = "identity"
    key_dim: int | None = None
    text_variant: str = "learned_pool"
    embed_dim: int | None = None
    embeddings_path: str | None = None
    use_base: bool = True
    use_retrieval: bool = True
    cache_retrieval: bool = True
    eval_every: int = 1
    fusion_scale: float | None = None  # None -> L/2
    index_type: str = "exact"
    hnsw_m: int = 32
    hnsw_ef_construction: int = 200
    hnsw_ef_search: int | None = None
    metric: str = "cosine"

    def validate(self):
        if self.batch_size < 1:
            raise ValidationError("batch size must be at least 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be at least 1")
        if self.eval_every < 1:
            raise ValidationError("eval cadence must be at least 1")
        if not (self.use_base or self.use_retrieval):
            raise ValidationError("at least one branch must be enabled")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")
        if self.k < 1:
            raise ValidationError("k must be at least 1")
        if self.fusion_scale is not None and self.fusion_scale <= 0:
            raise ValidationError("fusion scale must be positive")
        if self.index_type not in ("exact", "hnsw"):
            raise ValidationError("index type must be exact or hnsw")


def build_model(
    train_set: Dataset,
    cfg: TrainConfig,
    index=None,
    text_store: TextStore | None = None,
) -> RacModel:
    """Assemble a RacModel from a dataset plus (optionally) index artifacts.

    Initialization draws are keyed only by cfg.seed and each component's own
    stream tag, so the base head's weights do not depend on whether the
    retrieval branch is attached.
    """
    cfg.validate()
    L = train_set.num_classes
    base_W = base_b = None
    if cfg.use_base:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, _BASE_INIT_TAG])))
        scale = np.sqrt(2.0 / (train_set.dim + L))
        base_W = ParamTensor(rng.normal(0.0, scale, (train_set.dim, L)), "base.W")
        base_b = ParamTensor(np.zeros(L), "base.b")
    branch = None
    if cfg.use_retrieval:
        if index is None or text_store is None:
            raise ValidationError("retrieval branch needs an index and a text store")
        encoder = FrozenEncoder(cfg.encoder_kind, train_set.dim, key_dim=cfg.key_dim, seed=cfg.seed)
        if encoder.key_dim != index.dim:
            raise ValidationError(
                f"encoder emits dimension {encoder.key_dim}, index holds {index.dim}"
            )
        tokenizer = build_vocabulary(Tokenizer(), text_store.texts)
        spec = default_spec(cfg.text_variant)
        if cfg.embed_dim is not None:
            spec = TextEncoderSpec(cfg.text_variant, cfg.embed_dim, spec.pooling)
        text_encoder = TextEncoder(spec, tokenizer, L, seed=cfg.seed,
                                   embeddings_path=cfg.embeddings_path)
        branch = RetrievalBranch(
            frozen_encoder=encoder,
            index=index,
            text_store=text_store,
            tokenizer=tokenizer,
            text_encoder=text_encoder,
            config=RetrievalConfig(k=cfg.k, drop_first=cfg.drop_first, metric=index.metric),
        )
    return RacModel(
        num_classes=L,
        base_W=base_W,
        base_b=base_b,
        retrieval=branch,
        fusion_scale=cfg.fusion_scale if cfg.fusion_scale is not None else L / 2.0,
    )


def load_model_params(model: RacModel, params: list[ParamTensor]):
    """Copy checkpointed values into a freshly built model, matched by name."""
    by_name = {p.name: p for p in params}
    own = model.parameters()
    missing = [p.name for p in own if p.name not in by_name]
    extra = [n for n in by_name if n not in {p.name for p in own}]
    if missing or extra:
        raise ValidationError(
            f"checkpoint does not match model: missing {missing}, unexpected {extra}"
        )
    for p in own:
        src = by_name[p.name]
        if src.values.shape != p.values.shape:
            raise ValidationError(
                f"checkpoint tensor {p.name} has shape {src.values.shape}, "
                f"model expects {p.values.shape}"
            )
        p.values[...] = src.values


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class HistoryRecord:
    """One per-epoch measurement on one split."""

    epoch: int
    split: str
    loss: float
    top1: float
    top5: float
    be: float
    many: float
    med: float
    few: float


class TrainResult(NamedTuple):
    history: list[HistoryRecord]
    optim: OptimState | None


def _token_sequences(branch: RetrievalBranch, features: np.ndarray, training: bool):
    """Per-sample token lists; the cacheable unit of the retrieval lookup."""
    drop = branch.config.drop_first and training
    return [
        assemble_text(nb, branch.text_store, branch.config, branch.tokenizer, drop_first=drop)
        for nb in branch.neighbors_for(features, training)
    ]


def _topk_hits(values: np.ndarray, labels: np.ndarray, k: int) -> int:
    order = np.argsort(-values, axis=1, kind="stable")[:, :k]
    return int((order == labels[:, None]).any(axis=1).sum())


def _bucket_fields(buckets: dict[str, float]) -> tuple[float, float, float]:
    nan = float("nan")
    return buckets.get("many", nan), buckets.get("med", nan), buckets.get("few", nan)


def train(
    model: RacModel,
    train_set: Dataset,
    stats: ClassStats,
    cfg: TrainConfig,
    eval_set: Dataset | None = None,
) -> TrainResult:
    """Seeded mini-batch training of whichever branches the model carries.

    Retrieval lookups are epoch-invariant (the index is frozen), so with
    cfg.cache_retrieval the per-sample token lists are computed once up
    front; the cached and uncached paths produce bitwise-identical runs.
    """
    cfg.validate()
    if train_set.num_classes != model.num_classes:
        raise ValidationError("dataset and model disagree on the number of classes")
    spec = make_loss_spec(cfg.loss, stats, tau=cfg.tau, epsilon=cfg.epsilon,
                          reweight_scheme=cfg.reweight)
    X, y = train_set.features, train_set.labels
    n, L = train_set.n, model.num_classes
    token_cache = None
    if model.has_retrieval:
        branch = model.retrieval
        if branch.frozen_encoder.input_dim != train_set.dim:
            raise ValidationError(
                f"dataset dimension {train_set.dim} does not match encoder input "
                f"{branch.frozen_encoder.input_dim}"
            )
        need = branch.config.k + (1 if branch.config.drop_first else 0)
        if need > branch.index.n:
            raise ValidationError(
                f"retrieval needs {need} neighbors (k+1 with drop_first) "
                f"but the index holds only {branch.index.n}"
            )
        if cfg.cache_retrieval:
            token_cache = _token_sequences(branch, X, training=True)
    params = model.parameters()
    optim = None
    if cfg.optimizer == "adamw":
        optim = OptimState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                           eps=cfg.eps_opt, weight_decay=cfg.weight_decay)
    shuffle_rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([cfg.seed, _SHUFFLE_TAG]))
    )
    buckets_by_class = bucketize(stats)
    top5_k = min(5, L)
    history: list[HistoryRecord] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        loss_sum = 0.0
        top1_hits = 0
        top5_hits = 0
        cls_hits = np.zeros(L)
        cls_totals = np.zeros(L)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            Xb, yb = X[idx], y[idx]
            tokens = None
            if token_cache is not None:
                tokens = pad_batch([token_cache[i] for i in idx])
            output = model.forward(Xb, training=True, tokens=tokens)
            result = adjusted_ce(output.out, yb, spec)
            for p in params:
                p.zero_grad()
            model.backward(output, result.grad)
            if optim is not None:
                adamw_step(params, optim)
            else:
                sgd_step(params, cfg.lr)
            # epoch-level train metrics, tallied on the pre-step outputs
            loss_sum += result.loss * len(idx)
            preds = predictions_from_logits(output.out.values)
            top1_hits += int((preds == yb).sum())
            top5_hits += _topk_hits(output.out.values, yb, top5_k)
            np.add.at(cls_totals, yb, 1.0)
            np.add.at(cls_hits, yb[preds == yb], 1.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_class = cls_hits / cls_totals
        per_class[cls_totals == 0] = np.nan
        buckets = bucket_accuracy(per_class, buckets_by_class)
        many, med, few = _bucket_fields(buckets)
        history.append(HistoryRecord(
            epoch, "train", loss_sum / n, top1_hits / n, top5_hits / n,
            float(1.0 - np.nanmean(per_class)), many, med, few,
        ))
        if eval_set is not None and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            report = evaluate(model, eval_set, stats, loss_spec=spec)
            fr = report.fused
            many, med, few = _bucket_fields(fr.buckets)
            history.append(HistoryRecord(
                epoch, "test", report.output_loss, fr.top1, fr.top5,
                fr.balanced_error, many, med, few,
            ))
    return TrainResult(history, optim)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class BranchReport:
    """Metrics of one output head (base, ret, or the fused combination)."""

    top1: float
    top5: float
    balanced_error: float
    buckets: dict[str, float]
    per_class: np.ndarray  # (L,) accuracy, NaN where the split has no samples
    moving_avg: np.ndarray  # (L,) trailing window over count-sorted classes


@dataclass
class EvalReport:
    base: BranchReport | None
    ret: BranchReport | None
    fused: BranchReport
    class_counts: np.ndarray  # training counts, (L,)
    class_buckets: list[str]
    class_order: np.ndarray  # class ids sorted by descending training count
    output_loss: float | None = None


def moving_average(series: np.ndarray, window: int = MOVING_AVG_WINDOW) -> np.ndarray:
    """Trailing mean over up to `window` entries; output length equals input.

    NaN entries are skipped inside each window so sparse per-class
    accuracies do not poison their neighbors.
    """
    series = np.asarray(series, dtype=np.float64)
    if window < 1:
        raise ValidationError("window must be at least 1")
    out = np.empty(len(series))
    with warnings.catch_warnings():
        # an all-NaN window is a legitimate empty stretch, not an error
        warnings.simplefilter("ignore", RuntimeWarning)
        for i in range(len(series)):
            out[i] = np.nanmean(series[max(0, i - window + 1):i + 1])
    return out


def _branch_report(values: np.ndarray, labels: np.ndarray, L: int,
                   buckets_by_class: list[str], order: np.ndarray) -> BranchReport:
    preds = predictions_from_logits(values)
    per_class = per_class_accuracy(preds, labels, L)
    if np.isnan(per_class).all():
        raise ValidationError("evaluation split has no samples in any class")
    buckets = bucket_accuracy(per_class, buckets_by_class)
    return BranchReport(
        top1=float((preds == labels).mean()),
        top5=_topk_hits(values, labels, min(5, L)) / len(labels),
        balanced_error=float(1.0 - np.nanmean(per_class)),
        buckets=buckets,
        per_class=per_class,
        moving_avg=moving_average(per_class[order]),
    )


def evaluate(
    model: RacModel,
    test_set: Dataset,
    stats: ClassStats,
    loss_spec: LossSpec | None = None,
    batch_size: int = 256,
) -> EvalReport:
    """Frozen-model metrics, per branch and fused.

    Branch accuracies come from each branch's own argmax; the fused report
    is the model output (the fusion when both branches exist, otherwise the
    single branch). Buckets derive from training counts, not the test split.
    """
    if test_set.num_classes != model.num_classes:
        raise ValidationError("dataset and model disagree on the number of classes")
    L = model.num_classes
    X, y = test_set.features, test_set.labels
    base_chunks = []
    ret_chunks = []
    out_chunks = []
    loss_sum = 0.0
    for start in range(0, test_set.n, batch_size):
        output = model.forward(X[start:start + batch_size], training=False)
        if output.base_values is not None:
            base_chunks.append(output.base_values)
        if output.ret_values is not None:
            ret_chunks.append(output.ret_values)
        out_chunks.append(output.out.values)
        if loss_spec is not None:
            result = adjusted_ce(output.out, y[start:start + batch_size], loss_spec)
            loss_sum += result.loss * output.out.values.shape[0]
    counts = stats.counts
    buckets_by_class = bucketize(stats)
    # head first; ties broken toward the lower class id
    order = np.lexsort((np.arange(L), -counts))
    out_values = np.concatenate(out_chunks)
    return EvalReport(
        base=(_branch_report(np.concatenate(base_chunks), y, L, buckets_by_class, order)
              if base_chunks else None),
        ret=(_branch_report(np.concatenate(ret_chunks), y, L, buckets_by_class, order)
             if ret_chunks else None),
        fused=_branch_report(out_values, y, L, buckets_by_class, order),
        class_counts=counts.copy(),
        class_buckets=buckets_by_class,
        class_order=order,
        output_loss=(loss_sum / test_set.n) if loss_spec is not None else None,
    )


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_history(path: str, records: list[HistoryRecord]):
    """One `key=value` record per line; floats via repr() so files of
    deterministic runs compare byte for byte."""
    fields = ("epoch", "split", "loss", "top1", "top5", "be", "many", "med", "few")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(" ".join(f"{name}={_fmt(getattr(rec, name))}" for name in fields) + "\n")


def read_history(path: str) -> list[HistoryRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            kv = dict(part.split("=", 1) for part in line.split(" "))
            records.append(HistoryRecord(
                epoch=int(kv["epoch"]), split=kv["split"],
                loss=float(kv["loss"]), top1=float(kv["top1"]), top5=float(kv["top5"]),
                be=float(kv["be"]), many=float(kv["many"]), med=float(kv["med"]),
                few=float(kv["few"]),
            ))
    return records


def write_table(path: str, header: list[str], rows: list[list], comments: list[str] | None = None):
    """Comma-separated table with optional `# key=value` comment lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for line in comments or []:
            fh.write(f"# {line}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            if len(row) != len(header):
                raise ValidationError("table row does not match the header width")
            fh.write(",".join(_fmt(v) for v in row) + "\n")


PER_CLASS_HEADER = ["class_id", "count", "bucket", "acc_base", "acc_ret", "acc_fused"]


def write_per_class(path: str, report: EvalReport, comments: list[str] | None = None):
    """Per-class accuracy triples; absent branches record NaN columns."""
    nan = float("nan")
    rows = []
    for c in range(len(report.class_counts)):
        rows.append([
            c,
            int(report.class_counts[c]),
            report.class_buckets[c],
            float(report.base.per_class[c]) if report.base is not None else nan,
            float(report.ret.per_class[c]) if report.ret is not None else nan,
            float(report.fused.per_class[c]),
        ])
    write_table(path, PER_CLASS_HEADER, rows, comments)


# ---------------------------------------------------------------------------
# Index construction over raw sample pools
# ---------------------------------------------------------------------------


@dataclass
class IndexSource:
    """Raw material an index is built from: one row per stored sample."""

    features: np.ndarray  # (N, D) float64
    labels: np.ndarray  # (N,) int64
    texts: list[str]  # retrieval text of each row (its label's name)
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValidationError("index source needs aligned features and labels")
        if len(self.texts) != len(self.labels):
            raise ValidationError("index source needs one text per row")
        if not self.sources:
            self.sources = ["train"] * len(self.labels)
        if len(self.sources) != len(self.labels):
            raise ValidationError("index source needs one source tag per row")

    @property
    def n(self) -> int:
        return len(self.labels)

    def subset(self, rows: np.ndarray) -> "IndexSource":
        rows = np.asarray(rows, dtype=np.int64)
        return IndexSource(
            self.features[rows],
            self.labels[rows],
            [self.texts[i] for i in rows],
            [self.sources[i] for i in rows],
        )


def index_source_from(dataset: Dataset, names: list[str], tag: str = "train") -> IndexSource:
    """One index row per dataset sample, text taken from the class name."""
    if len(names) != dataset.num_classes:
        raise ValidationError("need one name per class")
    return IndexSource(
        dataset.features,
        dataset.labels,
        [names[c] for c in dataset.labels],
        [tag] * dataset.n,
    )


def merge_sources(*parts: IndexSource) -> IndexSource:
    if not parts:
        raise ValidationError("nothing to merge")
    dims = {p.features.shape[1] for p in parts}
    if len(dims) != 1:
        raise ValidationError(f"index sources disagree on dimension: {sorted(dims)}")
    return IndexSource(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.labels for p in parts]),
        [t for p in parts for t in p.texts],
        [s for p in parts for s in p.sources],
    )


def build_index_artifacts(source: IndexSource, cfg: TrainConfig):
    """Encode an index source and build (index, text store) from it."""
    encoder = FrozenEncoder(cfg.encoder_kind, source.features.shape[1],
                            key_dim=cfg.key_dim, seed=cfg.seed)
    store = KeyStore(encoder.encode(source.features))
    if cfg.index_type == "hnsw":
        params = HnswParams(M=cfg.hnsw_m, ef_construction=cfg.hnsw_ef_construction,
                            ef_search=cfg.hnsw_ef_search, seed=cfg.seed)
        index = build_hnsw(store, metric=cfg.metric, params=params)
    else:
        index = build_exact(store, metric=cfg.metric)
    text_store = TextStore(np.arange(source.n, dtype=np.int64), list(source.texts),
                           list(source.sources))
    return index, text_store


# ---------------------------------------------------------------------------
# Sweeps and ablations
# ---------------------------------------------------------------------------


class SweepResult(NamedTuple):
    header: list[str]
    rows: list[list]
    seconds: list[float]  # wall time per grid point; not part of the table


def _run_once(train_set: Dataset, test_set: Dataset, stats: ClassStats,
              cfg: TrainConfig, index, text_store) -> EvalReport:
    model = build_model(train_set, cfg, index=index, text_store=text_store)
    train(model, train_set, stats, cfg)
    return evaluate(model, test_set, stats)


def sweep_k(train_set: Dataset, test_set: Dataset, stats: ClassStats,
            index, text_store: TextStore, cfg: TrainConfig,
            k_values: list[int]) -> SweepResult:
    """Retrieval-only training once per k, same seed throughout."""
    if not k_values:
        raise ValidationError("k sweep needs at least one value")
    header = ["k", "top1", "many", "med", "few", "all"]
    rows = []
    seconds = []
    for k in k_values:
        run_cfg = replace(cfg, k=int(k), use_base=False, use_retrieval=True)
        t0 = time.perf_counter()
        report = _run_once(train_set, test_set, stats, run_cfg, index, text_store)
        seconds.append(time.perf_counter() - t0)
        many, med, few = _bucket_fields(report.fused.buckets)
        rows.append([int(k), report.fused.top1, many, med, few,
                     report.fused.buckets.get("all", float("nan"))])
    return SweepResult(header, rows, seconds)


def sweep_tau(train_set: Dataset, test_set: Dataset, stats: ClassStats,
              index, text_store: TextStore, cfg: TrainConfig,
              tau_values: list[float]) -> SweepResult:
    """One training run per tau; branch configuration taken from cfg."""
    if not tau_values:
        raise ValidationError("tau sweep needs at least one value")
    header = ["tau", "top1", "top5", "be", "many", "med", "few", "all"]
    rows = []
    seconds = []
    for tau in tau_values:
        run_cfg = replace(cfg, tau=float(tau))
        t0 = time.perf_counter()
        report = _run_once(train_set, test_set, stats, run_cfg, index, text_store)
        seconds.append(time.perf_counter() - t0)
        fr = report.fused
        many, med, few = _bucket_fields(fr.buckets)
        rows.append([float(tau), fr.top1, fr.top5, fr.balanced_error, many, med, few,
                     fr.buckets.get("all", float("nan"))])
    return SweepResult(header, rows, seconds)


def _ablation_rows(source: IndexSource, mode: str, value, seed: int) -> np.ndarray:
    """Row selection for one ablation grid point; original order is kept so
    the full-content point reproduces the unablated index exactly."""
    n = source.n
    if mode == "subsample_fraction":
        f = float(value)
        if not 0 < f <= 1:
            raise ValidationError("subsample fraction must lie in (0, 1]")
        m = max(1, int(round(f * n)))
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _ABLATION_TAG])))
        return np.sort(rng.choice(n, size=m, replace=False))
    if mode == "per_class_cap":
        cap = int(value)
        if cap < 1:
            raise ValidationError("per-class cap must be at least 1 (0 empties the index)")
        counts = np.bincount(source.labels)
        if cap > counts.max():
            raise ValidationError(
                f"per-class cap {cap} exceeds the largest class ({int(counts.max())} rows)"
            )
        taken: dict[int, int] = {}
        keep = []
        for i, label in enumerate(source.labels):
            c = taken.get(int(label), 0)
            if c < cap:
                taken[int(label)] = c + 1
                keep.append(i)
        return np.asarray(keep, dtype=np.int64)
    if mode == "class_count":
        want = int(value)
        available = int(source.labels.max()) + 1
        if not 1 <= want <= available:
            raise ValidationError(
                f"class count {want} outside the available range [1, {available}]"
            )
        return np.flatnonzero(source.labels < want)
    raise ValidationError(f"ablation mode must be one of {ABLATION_MODES}")


def ablate_index_content(train_set: Dataset, test_set: Dataset, stats: ClassStats,
                         source: IndexSource, cfg: TrainConfig, mode: str,
                         grid: list) -> SweepResult:
    """Retrieval-only training with the index rebuilt per grid point."""
    if not grid:
        raise ValidationError("ablation needs at least one grid value")
    header = ["mode", "value", "index_size", "top1", "many", "med", "few", "all"]
    rows = []
    seconds = []
    for value in grid:
        keep = _ablation_rows(source, mode, value, cfg.seed)
        run_cfg = replace(cfg, use_base=False, use_retrieval=True)
        index, text_store = build_index_artifacts(source.subset(keep), run_cfg)
        t0 = time.perf_counter()
        report = _run_once(train_set, test_set, stats, run_cfg, index, text_store)
        seconds.append(time.perf_counter() - t0)
        many, med, few = _bucket_fields(report.fused.buckets)
        rows.append([mode, value, len(keep), report.fused.top1, many, med, few,
                     report.fused.buckets.get("all", float("nan"))])
    return SweepResult(header, rows, seconds)


# ---------------------------------------------------------------------------
# Runtime report
# ---------------------------------------------------------------------------


@dataclass
class RuntimeVariant:
    """One row of the wall-time comparison."""

    label: str
    cfg: TrainConfig
    index: object | None = None
    text_store: TextStore | None = None


def runtime_report(train_set: Dataset, stats: ClassStats,
                   variants: list[RuntimeVariant]) -> SweepResult:
    """Seconds per epoch for each variant, same data and seed discipline.

    Lookup caching is disabled so every epoch pays the full retrieval cost;
    the point of the table is the per-epoch overhead of each configuration.
    """
    if len(variants) < 2:
        raise ValidationError("runtime report needs at least two variants")
    header = ["variant", "index_size", "text_encoder", "seconds_per_epoch"]
    rows = []
    seconds = []
    for variant in variants:
        cfg = replace(variant.cfg, cache_retrieval=False)
        model = build_model(train_set, cfg, index=variant.index, text_store=variant.text_store)
        t0 = time.perf_counter()
        train(model, train_set, stats, cfg)
        elapsed = time.perf_counter() - t0
        seconds.append(elapsed)
        rows.append([
            variant.label,
            variant.index.n if variant.index is not None and cfg.use_retrieval else 0,
            cfg.text_variant if cfg.use_retrieval else "none",
            elapsed / cfg.epochs,
        ])
    return SweepResult(header, rows, seconds)
