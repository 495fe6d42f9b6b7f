"""Resumable training stages sharing one run directory.

Layout of ``out_dir``::

    config.cfg                  effective config of the last command
    <stage>/config.json         the stage's own section, fixed at first start
    <stage>/ckpt_XXXXXXXX.pt    parameters and optimizer state keyed by step
    <stage>/log.csv             fixed-width per-step losses
    <stage>/manifest.json       written once the stage has finished

Every random draw inside a step comes from a stream keyed by
``(seed, stage, step)``, so a resumed run repeats an uninterrupted one exactly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from filelock import FileLock, Timeout

from sgdiff.checkpoint import (
    checkpoint_name, file_sha256, latest_checkpoint, load_checkpoint, read_latent_cache,
    read_manifest, restore, save_checkpoint, write_latent_cache, write_manifest,
)
from sgdiff.config import RunConfig, dump_config
from sgdiff.corpus import (
    DEFAULT_PALETTE, Corpus, SynthSpec, augment_scene, generate_synthetic, load_annotations,
    step_batch_indices, write_image,
)
from sgdiff.diffusion import LatentDiffusion, build_hsum, generate, make_schedule
from sgdiff.errors import ConfigError, DataValidationError, DependencyError, NumericError, SGDiffError
from sgdiff.evaluation import (
    ShapeClassifier, classify, derangement, extract_features, fid, inception_score,
    left_of_probe_graphs, probe_match_rate, retrieval_accuracy, single_object_dataset,
    train_classifier,
)
from sgdiff.image_encoder import to_nchw
from sgdiff.latent_ae import LatentAutoencoder, ae_train_step, psnr
from sgdiff.pretrain import PretrainModel, embed_pairs, lr_at, pad_rows, pretrain_step
from sgdiff.scenegraph import SceneGraph, graph_to_document
from sgdiff.sg_encoder import as_batch

log = logging.getLogger(__name__)

STAGES = ("pretrain", "autoencoder", "diffusion", "classifier")
_STAGE_IDS = {name: i + 1 for i, name in enumerate(STAGES)}
LOG_COLUMNS = {
    "pretrain": ("L_masked", "L_contrastive", "L_total", "tau"),
    "autoencoder": ("L_mse", "L_kl", "L_total"),
    "diffusion": ("L_dsm",),
}


def stage_seed(seed: int, stage: str, *extra: int) -> int:
    return int(np.random.SeedSequence([seed, _STAGE_IDS[stage], *extra]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# run directory and logs


class RunDir:
    """Exclusive handle on a run directory; use as a context manager."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out_dir)
        self._lock = None

    def __enter__(self) -> "RunDir":
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create run directory {self.root}: {exc}") from exc
        self._lock = FileLock(str(self.root / ".lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout as exc:
            raise SGDiffError(f"run directory {self.root} is in use by another process") from exc
        (self.root / "config.cfg").write_text(dump_config(self.cfg))
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def stage(self, name: str) -> Path:
        path = self.root / name
        path.mkdir(exist_ok=True)
        return path


class LogWriter:
    """Fixed-width CSV: a 9-character step column then 16-character value columns."""

    def __init__(self, path: Path, columns: Sequence[str], resume_step: int):
        self.path = path
        self.columns = tuple(columns)
        kept = []
        if resume_step > 0 and path.exists():
            for line in path.read_text().splitlines()[1:]:
                if int(line.split(",", 1)[0]) <= resume_step:
                    kept.append(line)
        header = ",".join([f"{'step':>9}"] + [f"{c:>16}" for c in self.columns])
        path.write_text("\n".join([header] + kept) + "\n")
        self._fh = open(path, "a")

    def write(self, step: int, values: Sequence[float]) -> None:
        self._fh.write(",".join([f"{step:>9d}"] + [f"{v:>16.9e}" for v in values]) + "\n")

    def close(self) -> None:
        self._fh.close()


def read_log(path: str | Path) -> dict[str, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    names = [c.strip() for c in lines[0].split(",")]
    rows = np.array([[float(v) for v in line.split(",")] for line in lines[1:]]).reshape(-1, len(names))
    return {n: rows[:, i] for i, n in enumerate(names)}


def _check_stage_config(stage_dir: Path, section: dict) -> None:
    path = stage_dir / "config.json"
    text = json.dumps(section, sort_keys=True, indent=2) + "\n"
    if path.exists() and latest_checkpoint(stage_dir) is not None:
        if json.loads(path.read_text()) != json.loads(text):
            raise ConfigError(
                f"{stage_dir} holds checkpoints from a different configuration; "
                "use a fresh out_dir or restore the original settings"
            )
    path.write_text(text)


def _train_loop(stage_dir: Path, stage: str, modules: dict, optimizer, total: int, every: int,
                step_fn: Callable[[int], dict], stop_after: int | None, log_every: int = 100) -> int:
    start = 0
    ckpt = latest_checkpoint(stage_dir)
    if ckpt is not None:
        payload = load_checkpoint(ckpt)
        restore(modules, payload)
        if payload["optimizer"] is not None:
            optimizer.load_state_dict(payload["optimizer"])
        start = payload["step"]
    writer = LogWriter(stage_dir / "log.csv", LOG_COLUMNS[stage], start)
    end = total if stop_after is None else min(total, stop_after)
    if start:
        log.info("%s: resuming at step %d", stage, start)
    try:
        for step in range(start, end):
            record = step_fn(step)
            writer.write(step + 1, [record[c] for c in LOG_COLUMNS[stage]])
            if log_every and (step + 1) % log_every == 0:
                log.info("%s %d/%d %s", stage, step + 1, total,
                         " ".join(f"{c}={record[c]:.4g}" for c in LOG_COLUMNS[stage]))
            if (step + 1) % every == 0 and step + 1 < end:
                save_checkpoint(stage_dir / checkpoint_name(step + 1), modules, optimizer, step + 1)
    finally:
        writer.close()
    if end > start:
        save_checkpoint(stage_dir / checkpoint_name(end), modules, optimizer, end)
    return end


def _finish(stage_dir: Path, stage: str, cfg: RunConfig, modules: dict, steps: int, started: float,
            upstream: dict | None = None, metrics: dict | None = None, meta: dict | None = None) -> dict:
    ckpt = stage_dir / checkpoint_name(steps)
    payload = load_checkpoint(ckpt)
    doc = {
        "stage": stage,
        "steps": steps,
        "seed": cfg.seed,
        "checkpoint": ckpt.name,
        "checkpoint_sha256": file_sha256(ckpt),
        "digest": payload["digest"],
        "config": json.loads((stage_dir / "config.json").read_text()),
        "upstream": upstream or {},
        "metrics": metrics or {},
        "meta": meta or {},
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    write_manifest(stage_dir / "manifest.json", doc)
    return doc


def _completed(stage_dir: Path, total: int) -> dict | None:
    path = stage_dir / "manifest.json"
    if path.exists():
        doc = read_manifest(path)
        if doc.get("steps") == total:
            return doc
    return None


def require_stage(root: Path, stage: str) -> tuple[dict, dict]:
    """Manifest and checkpoint payload of a finished upstream stage, verified by hash."""
    path = Path(root) / stage / "manifest.json"
    if not path.exists():
        raise DependencyError(f"missing upstream checkpoint: stage '{stage}' has not finished ({path} not found)")
    doc = read_manifest(path)
    ckpt = path.parent / doc["checkpoint"]
    if not ckpt.exists():
        raise DependencyError(f"missing upstream checkpoint: {ckpt}")
    if file_sha256(ckpt) != doc["checkpoint_sha256"]:
        raise DependencyError(f"upstream checkpoint {ckpt} does not match the hash in {path}")
    return doc, load_checkpoint(ckpt)


def _require_same_config(doc: dict, section, stage: str) -> None:
    if doc["config"] != json.loads(json.dumps(dataclasses.asdict(section))):
        raise DependencyError(f"stage '{stage}' was trained with a different [{stage}] configuration")


# ---------------------------------------------------------------------------
# corpora


def load_corpora(cfg: RunConfig) -> tuple[Corpus, Corpus | None]:
    c = cfg.corpus
    if c.source == "synthetic":
        train = generate_synthetic(SynthSpec(c.seed, c.num_scenes, c.image_size, c.max_objects), "train")
        heldout = generate_synthetic(SynthSpec(c.seed, c.heldout_scenes, c.image_size, c.max_objects), "test")
        return train, heldout
    train = load_annotations(c.train_manifest)
    heldout = load_annotations(c.heldout_manifest) if c.heldout_manifest else None
    if heldout is not None and heldout.vocab != train.vocab:
        raise DataValidationError("train and held-out manifests use different vocabularies")
    return train, heldout


def _usable(corpus: Corpus) -> list:
    scenes = [s for s, ok in zip(corpus.scenes, corpus.pretrainable) if ok]
    if not scenes:
        raise DataValidationError("corpus holds no scenes with boxes, an image and a triplet")
    return scenes


def _image_size(cfg: RunConfig, corpus: Corpus) -> int:
    size = corpus.image_size or cfg.corpus.image_size
    if size != cfg.corpus.image_size:
        raise ConfigError(f"corpus images are {size}px but [corpus] image_size = {cfg.corpus.image_size}")
    return size


# ---------------------------------------------------------------------------
# stage 1: masked contrastive pretraining


def build_pretrain_model(cfg: RunConfig, vocab) -> PretrainModel:
    torch.manual_seed(stage_seed(cfg.seed, "pretrain"))
    return PretrainModel(vocab.num_objects, vocab.num_relations, cfg.corpus.image_size, cfg.pretrain)


def run_pretrain(cfg: RunConfig, stop_after: int | None = None) -> dict:
    pc = cfg.pretrain
    with RunDir(cfg) as run:
        stage_dir = run.stage("pretrain")
        done = _completed(stage_dir, pc.steps)
        if done is not None:
            return done
        started = time.time()
        train, heldout = load_corpora(cfg)
        _image_size(cfg, train)
        scenes = _usable(train)
        _check_stage_config(stage_dir, dataclasses.asdict(pc))
        model = build_pretrain_model(cfg, train.vocab)
        optimizer = torch.optim.Adam(model.parameters(), lr=pc.lr)
        synthetic = cfg.corpus.source == "synthetic"
        sid = _STAGE_IDS["pretrain"]

        def step_fn(step):
            for group in optimizer.param_groups:
                group["lr"] = lr_at(step, pc.lr, pc.steps, pc.lr_schedule, pc.warmup_steps)
            idx = step_batch_indices(len(scenes), pc.batch_size, cfg.seed, step)
            rng = np.random.default_rng([cfg.seed, sid, step])
            batch = [scenes[int(i)] for i in idx]
            if pc.augment:
                batch = [augment_scene(s, train.vocab, rng, DEFAULT_PALETTE, recolor=synthetic) for s in batch]
            r = pretrain_step(model, optimizer, batch, rng)
            return {"L_masked": r["masked"], "L_contrastive": r["contrastive"], "L_total": r["total"], "tau": r["tau"]}

        modules = {"pretrain": model}
        end = _train_loop(stage_dir, "pretrain", modules, optimizer, pc.steps, pc.checkpoint_every, step_fn, stop_after, pc.log_every)
        if end < pc.steps:
            return {"stage": "pretrain", "steps": end, "complete": False}
        metrics = {}
        if heldout is not None and len(heldout) >= 2:
            metrics = retrieval_metrics(model, _usable(heldout))
        return _finish(stage_dir, "pretrain", cfg, modules, end, started, metrics=metrics)


def retrieval_metrics(model: PretrainModel, scenes) -> dict:
    g, x = embed_pairs(model, scenes)
    return {
        "retrieval_graph_to_image": retrieval_accuracy(g, x, "graph_to_image"),
        "retrieval_image_to_graph": retrieval_accuracy(g, x, "image_to_graph"),
        "pairs": len(scenes),
    }


def load_pretrained(cfg: RunConfig, vocab) -> tuple[PretrainModel, dict]:
    doc, payload = require_stage(Path(cfg.out_dir), "pretrain")
    _require_same_config(doc, cfg.pretrain, "pretrain")
    model = PretrainModel(vocab.num_objects, vocab.num_relations, cfg.corpus.image_size, cfg.pretrain)
    restore({"pretrain": model}, payload)
    model.eval()
    return model, doc


def run_retrieve(cfg: RunConfig, manifest: str | Path | None = None) -> dict:
    train, heldout = load_corpora(cfg)
    corpus = load_annotations(manifest) if manifest else heldout
    if corpus is None:
        raise ConfigError("no corpus to retrieve from: pass a manifest or set heldout_manifest")
    if corpus.vocab != train.vocab:
        raise DataValidationError("retrieval corpus vocabulary differs from the training vocabulary")
    model, doc = load_pretrained(cfg, train.vocab)
    out = retrieval_metrics(model, _usable(corpus))
    out["checkpoint"] = doc["digest"]
    return out


# ---------------------------------------------------------------------------
# stage 2: latent autoencoder


def run_train_ae(cfg: RunConfig, stop_after: int | None = None) -> dict:
    ac = cfg.autoencoder
    with RunDir(cfg) as run:
        stage_dir = run.stage("autoencoder")
        done = _completed(stage_dir, ac.steps)
        if done is not None:
            return done
        started = time.time()
        train, heldout = load_corpora(cfg)
        size = _image_size(cfg, train)
        images = to_nchw(np.stack([s.image for s in train.scenes if s.image is not None]))
        if len(images) == 0:
            raise DataValidationError("autoencoder training needs images")
        _check_stage_config(stage_dir, dataclasses.asdict(ac))
        torch.manual_seed(stage_seed(cfg.seed, "autoencoder"))
        model = LatentAutoencoder(size, ac)
        optimizer = torch.optim.Adam(model.parameters(), lr=ac.lr)

        def step_fn(step):
            idx = torch.as_tensor(step_batch_indices(len(images), ac.batch_size, cfg.seed, step))
            gen = torch.Generator().manual_seed(stage_seed(cfg.seed, "autoencoder", step))
            r = ae_train_step(model, optimizer, images[idx], gen)
            return {"L_mse": r["mse"], "L_kl": r["kl"], "L_total": r["total"]}

        modules = {"autoencoder": model}
        end = _train_loop(stage_dir, "autoencoder", modules, optimizer, ac.steps, ac.checkpoint_every, step_fn, stop_after, ac.log_every)
        if end < ac.steps:
            return {"stage": "autoencoder", "steps": end, "complete": False}
        metrics = {}
        if heldout is not None:
            metrics["heldout_psnr_db"] = reconstruction_psnr(model, heldout.images())
        c, h, _ = model.latent_shape
        meta = {"downsample": ac.downsample, "latent_channels": c, "latent_size": h, "image_size": size}
        return _finish(stage_dir, "autoencoder", cfg, modules, end, started, metrics=metrics, meta=meta)


@torch.no_grad()
def reconstruction_psnr(model: LatentAutoencoder, images: np.ndarray) -> float:
    model.eval()
    x = to_nchw(images)
    recon = model.decode(model.encode(x, sample=False).mean)
    return psnr(recon, x)


def load_autoencoder(cfg: RunConfig) -> tuple[LatentAutoencoder, dict]:
    doc, payload = require_stage(Path(cfg.out_dir), "autoencoder")
    _require_same_config(doc, cfg.autoencoder, "autoencoder")
    model = LatentAutoencoder(cfg.corpus.image_size, cfg.autoencoder)
    restore({"autoencoder": model}, payload)
    model.eval()
    return model, doc


# ---------------------------------------------------------------------------
# stage 3: latent diffusion


@torch.no_grad()
def cache_latents(path: Path, autoencoder: LatentAutoencoder, images: np.ndarray, source: str,
                  chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and log-variance of every training image.

    Both are stored in one cache file, stacked on the channel axis, and reused
    while the autoencoder is unchanged.
    """
    if not path.exists() or read_latent_cache(path)[1]["source"] != source:
        parts = []
        for k in range(0, len(images), chunk):
            code = autoencoder.encode(to_nchw(images[k : k + chunk]), sample=False)
            parts.append(torch.cat([code.mean, code.logvar], dim=1))
        write_latent_cache(path, torch.cat(parts), source)
    stacked, header = read_latent_cache(path)
    if header["count"] != len(images):
        raise DataValidationError(f"{path}: cached {header['count']} latents for {len(images)} images")
    c = header["c"] // 2
    return stacked[:, :c], stacked[:, c:]


def augmented_views(scenes, vocab, copies: int, seed: int, recolor: bool = True) -> list:
    """``copies`` augmented versions of every scene, copy-major, from fixed per-scene streams."""
    sid = _STAGE_IDS["diffusion"]
    return [
        augment_scene(scene, vocab, np.random.default_rng([seed, sid, k, i]), DEFAULT_PALETTE, recolor=recolor)
        for k in range(copies)
        for i, scene in enumerate(scenes)
    ]


def run_train_diffusion(cfg: RunConfig, stop_after: int | None = None) -> dict:
    dc = cfg.diffusion
    with RunDir(cfg) as run:
        pre_doc, _ = require_stage(run.root, "pretrain")
        ae_doc, _ = require_stage(run.root, "autoencoder")
        stage_dir = run.stage("diffusion")
        done = _completed(stage_dir, dc.steps)
        if done is not None:
            return done
        started = time.time()
        train, _ = load_corpora(cfg)
        _image_size(cfg, train)
        scenes = _usable(train)
        if dc.augment_copies:
            scenes = scenes + augmented_views(scenes, train.vocab, dc.augment_copies, cfg.seed,
                                              recolor=cfg.corpus.source == "synthetic")
        pretrained, _ = load_pretrained(cfg, train.vocab)
        autoencoder, _ = load_autoencoder(cfg)
        schedule = make_schedule(dc.T, dc.beta_start, dc.beta_end)
        _check_stage_config(stage_dir, dataclasses.asdict(dc))

        source = hashlib.sha256(f"{ae_doc['digest']}:{dc.augment_copies}:{cfg.seed}".encode()).hexdigest()
        means, logvars = cache_latents(
            stage_dir / "latents.sglc", autoencoder, np.stack([s.image for s in scenes]), source
        )
        latents, stds = torch.as_tensor(means), torch.as_tensor(np.exp(0.5 * logvars))
        torch.manual_seed(stage_seed(cfg.seed, "diffusion"))
        model = LatentDiffusion(cfg.pretrain.embed_dim, cfg.autoencoder.latent_channels, dc)
        model.latent_scale.fill_(float(1.0 / latents.std()))
        encoder, heads = pretrained.sg_encoder, pretrained.heads
        graphs = [s.graph for s in scenes]
        params = list(model.parameters())
        if dc.finetune_encoder:
            params += list(encoder.parameters()) + list(heads.parameters())
        else:
            with torch.no_grad():
                batch = as_batch(graphs)
                tokens, valid = pad_rows(build_hsum(encoder(batch), batch, heads), batch.triplet_graph, batch.num_graphs)
        optimizer = torch.optim.Adam(params, lr=dc.lr)

        def step_fn(step):
            for group in optimizer.param_groups:
                group["lr"] = lr_at(step, dc.lr, dc.steps, dc.lr_schedule, dc.warmup_steps)
            idx = step_batch_indices(len(scenes), dc.batch_size, cfg.seed, step)
            gen = torch.Generator().manual_seed(stage_seed(cfg.seed, "diffusion", step))
            z0 = latents[torch.as_tensor(idx)]
            t = torch.randint(1, dc.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(z0.shape, generator=gen)
            if dc.sample_latents:
                z0 = z0 + stds[torch.as_tensor(idx)] * torch.randn(z0.shape, generator=gen)
            model.train()
            if dc.finetune_encoder:
                b = as_batch([graphs[int(i)] for i in idx])
                tok, val = pad_rows(build_hsum(encoder(b), b, heads), b.triplet_graph, b.num_graphs)
            else:
                sel = torch.as_tensor(idx)
                tok, val = tokens[sel], valid[sel]
            optimizer.zero_grad(set_to_none=True)
            loss = model.loss(z0, tok, val, t, eps, schedule)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite diffusion loss at step {step + 1}")
            loss.backward()
            optimizer.step()
            return {"L_dsm": float(loss.detach())}

        modules = {"diffusion": model}
        if dc.finetune_encoder:
            modules["pretrain"] = pretrained
        end = _train_loop(stage_dir, "diffusion", modules, optimizer, dc.steps, dc.checkpoint_every, step_fn, stop_after, dc.log_every)
        if end < dc.steps:
            return {"stage": "diffusion", "steps": end, "complete": False}
        upstream = {"pretrain": pre_doc["checkpoint_sha256"], "autoencoder": ae_doc["checkpoint_sha256"]}
        meta = {"latent_scale": float(model.latent_scale)}
        return _finish(stage_dir, "diffusion", cfg, modules, end, started, upstream=upstream, meta=meta)


@dataclass
class Generator:
    """Everything needed to turn graphs into images."""

    pretrained: PretrainModel
    autoencoder: LatentAutoencoder
    diffusion: LatentDiffusion
    schedule: object
    digests: dict

    @torch.no_grad()
    def images(self, graphs, seed: int) -> np.ndarray:
        """``(N, H, W, 3)`` images for one graph per sample."""
        out = generate(list(graphs), self.pretrained.sg_encoder, self.pretrained.heads, self.diffusion,
                       self.autoencoder, self.schedule, len(graphs), seed)
        return out.permute(0, 2, 3, 1).numpy()


def load_generator(cfg: RunConfig, vocab) -> Generator:
    root = Path(cfg.out_dir)
    doc, payload = require_stage(root, "diffusion")
    _require_same_config(doc, cfg.diffusion, "diffusion")
    pretrained, pre_doc = load_pretrained(cfg, vocab)
    autoencoder, ae_doc = load_autoencoder(cfg)
    if doc["upstream"] != {"pretrain": pre_doc["checkpoint_sha256"], "autoencoder": ae_doc["checkpoint_sha256"]}:
        raise DependencyError("diffusion checkpoint was trained against different upstream checkpoints")
    model = LatentDiffusion(cfg.pretrain.embed_dim, cfg.autoencoder.latent_channels, cfg.diffusion)
    groups = {"diffusion": model}
    if cfg.diffusion.finetune_encoder:
        groups["pretrain"] = pretrained
    restore(groups, payload)
    model.eval()
    dc = cfg.diffusion
    digests = {"pretrain": pre_doc["digest"], "autoencoder": ae_doc["digest"], "diffusion": doc["digest"]}
    return Generator(pretrained, autoencoder, model, make_schedule(dc.T, dc.beta_start, dc.beta_end), digests)


def run_sample(cfg: RunConfig, graph: SceneGraph, count: int, seed: int, out_dir: str | Path) -> dict:
    """Writes ``count`` PNGs plus a sampling manifest to ``out_dir``."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    train, _ = load_corpora(cfg)
    gen = load_generator(cfg, train.vocab)
    started = time.time()
    images = gen.images([graph] * count, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, img in enumerate(images):
        names.append(f"{i:06d}.png")
        write_image(out / names[-1], img)
    doc = {
        "seed": seed,
        "count": count,
        "T": cfg.diffusion.T,
        "mode": cfg.diffusion.mode,
        "checkpoints": gen.digests,
        "graph": graph_to_document(graph, train.vocab),
        "images": names,
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    write_manifest(out / "manifest.json", doc)
    return doc


def run_probe(cfg: RunConfig, count: int, seed: int) -> dict:
    """Color/position probe on ``left-of`` graphs, matched and with shuffled conditioning."""
    if cfg.corpus.source != "synthetic":
        raise ConfigError("the color/position probe needs a synthetic corpus")
    train, _ = load_corpora(cfg)
    gen = load_generator(cfg, train.vocab)
    graphs, expected = left_of_probe_graphs(train.vocab, DEFAULT_PALETTE, count, seed)
    matched = gen.images(graphs, seed)
    perm = derangement(count, seed)
    shuffled = gen.images([graphs[int(p)] for p in perm], seed)
    return {
        "matched": probe_match_rate(matched, expected, DEFAULT_PALETTE),
        "shuffled": probe_match_rate(shuffled, expected, DEFAULT_PALETTE),
        "count": count,
        "checkpoints": gen.digests,
    }


# ---------------------------------------------------------------------------
# evaluation backbone and metrics


def run_train_classifier(cfg: RunConfig) -> dict:
    ec = cfg.eval
    with RunDir(cfg) as run:
        stage_dir = run.stage("classifier")
        done = _completed(stage_dir, ec.classifier_steps)
        if done is not None:
            return done
        if cfg.corpus.source != "synthetic":
            raise ConfigError("the desk classifier backbone is defined for synthetic corpora only")
        started = time.time()
        vocab = SynthSpec().vocab
        size = cfg.corpus.image_size
        seed = stage_seed(cfg.seed, "classifier")
        x, y = single_object_dataset(vocab, DEFAULT_PALETTE, size, ec.classifier_images, seed)
        xt, yt = single_object_dataset(vocab, DEFAULT_PALETTE, size, 512, seed + 1)
        _check_stage_config(stage_dir, dataclasses.asdict(ec))
        torch.manual_seed(seed)
        model = ShapeClassifier(vocab.num_objects, ec.classifier_width, ec.feature_dim)
        train_classifier(model, x, y, ec.classifier_steps, seed=seed)
        accuracy = float(np.mean(classify(xt, model).argmax(1) == yt))
        save_checkpoint(stage_dir / checkpoint_name(ec.classifier_steps), {"classifier": model}, None, ec.classifier_steps)
        return _finish(stage_dir, "classifier", cfg, {"classifier": model}, ec.classifier_steps, started,
                       metrics={"heldout_accuracy": accuracy})


def load_classifier(cfg: RunConfig, min_accuracy: float = 0.95) -> tuple[ShapeClassifier, dict]:
    doc, payload = require_stage(Path(cfg.out_dir), "classifier")
    if doc["metrics"]["heldout_accuracy"] < min_accuracy:
        raise DependencyError(
            f"classifier accuracy {doc['metrics']['heldout_accuracy']:.3f} is below the "
            f"{min_accuracy:.2f} gate for use as a metric backbone"
        )
    ec = cfg.eval
    model = ShapeClassifier(SynthSpec().vocab.num_objects, ec.classifier_width, ec.feature_dim)
    restore({"classifier": model}, payload)
    return model, doc


def _load_image_dir(path: Path) -> np.ndarray:
    from sgdiff.corpus import read_image

    manifest = path / "manifest.json"
    if manifest.exists():
        names = read_manifest(manifest).get("images", [])
    else:
        names = sorted(p.name for p in path.glob("*.png"))
    if not names:
        raise DataValidationError(f"no generated images found in {path}")
    return np.stack([read_image(path / n) for n in names])


def run_evaluate(cfg: RunConfig, generated: str | Path, reference: str | Path, out: str | Path | None = None) -> dict:
    """IS and FID of generated images against a reference manifest under the desk backbone."""
    generated = Path(generated)
    gen_images = _load_image_dir(generated)
    ref_corpus = load_annotations(reference)
    ref_images = ref_corpus.images()
    run_train_classifier(cfg)
    classifier, cls_doc = load_classifier(cfg)
    source = f"shape-classifier:{cls_doc['digest'][:16]}"
    splits = min(cfg.eval.is_splits, len(gen_images))
    is_mean, is_std = inception_score(classify(gen_images, classifier), splits)
    value = fid(extract_features(gen_images, classifier, source), extract_features(ref_images, classifier, source))
    gen_manifest = generated / "manifest.json"
    report = {
        "metrics": [
            {"name": "inception_score", "value": is_mean, "std": is_std, "splits": splits},
            {"name": "fid", "value": value, "std": None},
        ],
        "extractor": source,
        "corpora": {
            "generated": file_sha256(gen_manifest) if gen_manifest.exists() else str(generated),
            "reference": file_sha256(reference),
        },
        "checkpoints": read_manifest(gen_manifest).get("checkpoints", {}) if gen_manifest.exists() else {},
        "counts": {"generated": len(gen_images), "reference": len(ref_images)},
    }
    write_manifest(Path(out) if out else generated / "metrics.json", report)
    return report
