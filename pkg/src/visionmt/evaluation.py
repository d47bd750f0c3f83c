"""Zero-shot classification, retrieval Recall@1 and a linear depth probe."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .data.schema import DEFAULT_CATALOG, detokenize, tokenize
from .data.synthetic import CAPTION_PREFIXES, class_prompts, generate_sample
from .encoders import pad_tokens

METRICS = ("zeroshot_acc", "recall_i2t", "recall_t2i", "depth_rmse")
LOWER_IS_BETTER = {"depth_rmse"}

ZEROSHOT_STREAM, RETRIEVAL_STREAM, PROBE_TRAIN_STREAM, PROBE_EVAL_STREAM = 11, 12, 13, 14


@dataclass
class EvalResult:
    metric: str
    value: float
    dataset: str
    checkpoint: str
    seed: int
    flags: tuple[str, ...] = ()

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        if not math.isfinite(self.value):
            raise ValueError(f"{self.metric} is not finite")

    def to_record(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d


def strip_prefix(text: str) -> str:
    """Drop the caption prefix; it carries no visual content."""
    for p in sorted(CAPTION_PREFIXES, key=len, reverse=True):
        if p and text.startswith(p + " "):
            return text[len(p) + 1:]
    return text


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest column index."""
    return np.argmax(scores, axis=1)


def _images_tensor(samples, dtype) -> torch.Tensor:
    arr = np.stack([s.image for s in samples]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


@torch.no_grad()
def embed_images(model, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    model.eval()
    out = [model.image_embedding(images[i:i + chunk]) for i in range(0, len(images), chunk)]
    return torch.cat(out).double().numpy()


@torch.no_grad()
def embed_texts(model, token_lists) -> np.ndarray:
    model.eval()
    ids, lengths = pad_tokens(list(token_lists), model.cfg.encoder.text_len)
    return model.text_embedding(ids, lengths).double().numpy()


def zero_shot_predict(image_emb: np.ndarray, class_emb: np.ndarray) -> np.ndarray:
    """Cosine-similarity argmax of image embeddings over class embeddings."""
    im = image_emb / np.linalg.norm(image_emb, axis=1, keepdims=True)
    cl = class_emb / np.linalg.norm(class_emb, axis=1, keepdims=True)
    return argmax_lowest(im @ cl.T)


def class_embeddings(model, prompts: list[list[str]]) -> np.ndarray:
    """Average each class's prompt embeddings (then renormalize)."""
    if len(prompts) < 1:
        raise ValueError("no classes")
    out = []
    for plist in prompts:
        e = embed_texts(model, [tokenize(p) for p in plist]).mean(0)
        out.append(e / np.linalg.norm(e))
    return np.stack(out)


def zero_shot_classify(model, prompts: list[list[str]], images: torch.Tensor, labels) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    if len(prompts) == 1:
        return 1.0
    pred = zero_shot_predict(embed_images(model, images), class_embeddings(model, prompts))
    return float((pred == labels).mean())


def recall_at_1(image_emb: np.ndarray, text_emb: np.ndarray) -> tuple[float, float]:
    """(image->text, text->image) Recall@1 where pair i is (image i, text i)."""
    n = len(image_emb)
    if n < 2:
        raise ValueError("retrieval needs at least two pairs")
    sim = image_emb @ text_emb.T
    truth = np.arange(n)
    i2t = float((argmax_lowest(sim) == truth).mean())
    t2i = float((argmax_lowest(sim.T) == truth).mean())
    return i2t, t2i


def retrieval_recall_at_1(model, images: torch.Tensor, captions) -> tuple[float, float, bool]:
    """Returns (i2t, t2i, duplicate_texts_flag)."""
    texts = [detokenize(c) for c in captions]
    dup = len(set(texts)) != len(texts)
    i2t, t2i = recall_at_1(embed_images(model, images), embed_texts(model, captions))
    return i2t, t2i, dup


@torch.no_grad()
def probe_features(model, images: torch.Tensor, chunk: int = 256) -> np.ndarray:
    """Per-patch [global token, patch token] features: B x N x 2D."""
    model.eval()
    feats = []
    for i in range(0, len(images), chunk):
        f = model.vision(images[i:i + chunk])
        g = model.pool(f.final)
        z = f.final
        feats.append(torch.cat([g[:, None, :].expand_as(z), z], dim=-1))
    return torch.cat(feats).double().numpy()


def depth_targets(depths: np.ndarray, patch: int) -> np.ndarray:
    """B x H x W depth -> B x N x patch^2, patches in row-major order."""
    b, h, w = depths.shape
    x = depths.reshape(b, h // patch, patch, w // patch, patch).transpose(0, 1, 3, 2, 4)
    return x.reshape(b, (h // patch) * (w // patch), patch * patch)


def fit_linear_probe(x: np.ndarray, y: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    xb = np.concatenate([x, np.ones((len(x), 1))], axis=1)
    a = xb.T @ xb + ridge * np.eye(xb.shape[1])
    return np.linalg.solve(a, xb.T @ y)


def rmse(pred: np.ndarray, target: np.ndarray) -> float:
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def depth_probe_rmse(model, train_images, train_depth, eval_images, eval_depth, ridge: float = 1e-3
                     ) -> tuple[float, float, bool]:
    """Linear probe on frozen features; returns (rmse, constant_mean_rmse, diverged)."""
    p = model.cfg.encoder.patch_size
    xtr = probe_features(model, train_images)
    ytr = depth_targets(np.asarray(train_depth, dtype=np.float64), p)
    w = fit_linear_probe(xtr.reshape(-1, xtr.shape[-1]), ytr.reshape(-1, ytr.shape[-1]), ridge)
    xev = probe_features(model, eval_images)
    yev = depth_targets(np.asarray(eval_depth, dtype=np.float64), p)
    xb = np.concatenate([xev.reshape(-1, xev.shape[-1]), np.ones((xev.shape[0] * xev.shape[1], 1))], 1)
    pred = xb @ w
    baseline = rmse(np.full_like(yev, ytr.mean()), yev)
    value = rmse(pred, yev.reshape(-1, yev.shape[-1]))
    diverged = not math.isfinite(value)
    return value, baseline, diverged


@dataclass
class EvalSuite:
    """Held-out synthetic sets, generated on streams disjoint from training."""

    zs_images: torch.Tensor
    zs_labels: np.ndarray
    prompts: list[list[str]]
    ret_images: torch.Tensor
    ret_captions: list[np.ndarray]
    probe_train_images: torch.Tensor
    probe_train_depth: np.ndarray
    probe_eval_images: torch.Tensor
    probe_eval_depth: np.ndarray
    seed: int

    @classmethod
    def build(cls, seed: int = 1234, n_zeroshot: int = 250, n_pairs: int = 100,
              n_probe_train: int = 500, n_probe_eval: int = 200, catalog=DEFAULT_CATALOG,
              dtype=torch.float32) -> "EvalSuite":
        k = len(catalog)
        zs = [generate_sample(seed, i, catalog, n_shapes=1, classes=[i % k], stream=ZEROSHOT_STREAM)
              for i in range(n_zeroshot)]
        pairs, seen, i = [], set(), 0
        while len(pairs) < n_pairs:
            s = generate_sample(seed, i, catalog, stream=RETRIEVAL_STREAM)
            i += 1
            core = strip_prefix(detokenize(s.caption))
            if core in seen:
                continue
            seen.add(core)
            pairs.append(s)
        ptr = [generate_sample(seed, i, catalog, stream=PROBE_TRAIN_STREAM) for i in range(n_probe_train)]
        pev = [generate_sample(seed, i, catalog, stream=PROBE_EVAL_STREAM) for i in range(n_probe_eval)]
        return cls(
            zs_images=_images_tensor(zs, dtype), zs_labels=np.array([s.labels[0] for s in zs]),
            prompts=class_prompts(catalog),
            ret_images=_images_tensor(pairs, dtype), ret_captions=[s.caption for s in pairs],
            probe_train_images=_images_tensor(ptr, dtype),
            probe_train_depth=np.stack([s.depth for s in ptr]),
            probe_eval_images=_images_tensor(pev, dtype),
            probe_eval_depth=np.stack([s.depth for s in pev]),
            seed=seed,
        )


def evaluate(model, suite: EvalSuite, checkpoint: str = "", seed: int = 0) -> dict[str, EvalResult]:
    dtype = next(model.parameters()).dtype
    acc = zero_shot_classify(model, suite.prompts, suite.zs_images.to(dtype), suite.zs_labels)
    i2t, t2i, dup = retrieval_recall_at_1(model, suite.ret_images.to(dtype), suite.ret_captions)
    d, base, diverged = depth_probe_rmse(model, suite.probe_train_images.to(dtype),
                                         suite.probe_train_depth, suite.probe_eval_images.to(dtype),
                                         suite.probe_eval_depth)
    if diverged:
        raise FloatingPointError("depth probe diverged")
    ret_flags = ("duplicate_texts",) if dup else ()
    return {
        "zeroshot_acc": EvalResult("zeroshot_acc", acc, "synthetic-zeroshot", checkpoint, seed),
        "recall_i2t": EvalResult("recall_i2t", i2t, "synthetic-pairs", checkpoint, seed, ret_flags),
        "recall_t2i": EvalResult("recall_t2i", t2i, "synthetic-pairs", checkpoint, seed, ret_flags),
        "depth_rmse": EvalResult("depth_rmse", d, "synthetic-depth", checkpoint, seed),
        "depth_baseline": EvalResult("depth_rmse", base, "synthetic-depth", "constant-mean", seed),
    }
