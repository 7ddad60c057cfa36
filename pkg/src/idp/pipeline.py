"""Stage runners for the end-to-end pipeline and the content-hash manifest.

Every stage reads its inputs from ``<outdir>/<stage>/`` of upstream stages and
writes its outputs under its own directory. The manifest records, per stage,
the digest of each input and output file and the wall-clock time.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint
from .cdim import BehaviorPositives, CdimHyper, TextVectorStore, adapted, load_adapter, mine_behavior_positives, \
    save_adapter, tune_cdim
from .config import RunConfig
from .dataset import (InteractionStore, align_vectors, filter_min_interactions, ingest, read_vectors,
                      select_domains, split_leave_one_out)
from .evaluation import EvalReport, emit_report, rank_users, write_ranks
from .hnsw import BuildParams, build_index, load_index, save_index
from .matcher import EXACT_LIMIT, assign_neighbors, generate_embeddings, load_generated
from .seqmodel import SeqHyper, load_model, pretrain, save_model
from .synth import SynthSpec, synthesize_corpus
from .transfer import DeploymentMode, deploy, fit_pca

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "mine_positives", "tune_cdim", "build_index", "gen_embeddings", "deploy", "eval")
DEPENDS = {
    "pretrain": (),
    "mine_positives": ("pretrain",),
    "tune_cdim": ("mine_positives",),
    "build_index": ("tune_cdim",),
    "gen_embeddings": ("pretrain", "build_index"),
    "deploy": ("pretrain", "gen_embeddings"),
    "eval": ("deploy",),
}
MANIFEST = "manifest.json"


class StageError(RuntimeError):
    pass


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


# --- manifest -----------------------------------------------------------------

def read_manifest(outdir: Path) -> dict:
    path = outdir / MANIFEST
    if not path.exists():
        return {"data": None, "stages": []}
    return json.loads(path.read_text(encoding="utf-8"))


def _write_manifest(outdir: Path, manifest: dict) -> None:
    order = {s: i for i, s in enumerate(STAGES)}
    manifest["stages"].sort(key=lambda r: order[r["stage"]])
    (outdir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _record(outdir: Path, stage: str, inputs: list[Path], outputs: list[Path], seconds: float) -> None:
    manifest = read_manifest(outdir)
    rel = lambda p: str(Path(p).resolve().relative_to(outdir.resolve())) if Path(p).resolve().is_relative_to(
        outdir.resolve()) else str(p)
    entry = {
        "stage": stage,
        "inputs": {rel(p): file_digest(p) for p in inputs},
        "outputs": {rel(p): file_digest(p) for p in outputs},
        "seconds": round(seconds, 3),
    }
    if stage == "synth":
        manifest["data"] = entry
    else:
        manifest["stages"] = [r for r in manifest["stages"] if r["stage"] != stage] + [entry]
    _write_manifest(outdir, manifest)


def _require(outdir: Path, stage: str) -> dict:
    """Outputs of an upstream stage, checked against their recorded digests."""
    manifest = read_manifest(outdir)
    for rec in manifest["stages"]:
        if rec["stage"] == stage:
            for rel, digest in rec["outputs"].items():
                p = outdir / rel
                if not p.exists():
                    raise StageError(f"missing upstream artifact {p}; run stage '{stage}' first")
                if file_digest(p) != digest:
                    raise StageError(f"artifact {p} changed since stage '{stage}' ran; re-run '{stage}'")
            return rec
    raise StageError(f"missing upstream artifacts of stage '{stage}'; run stage '{stage}' first")


# --- shared loading -----------------------------------------------------------

@dataclass
class Corpus:
    store: InteractionStore
    interactions_path: Path
    vector_paths: dict[str, Path]

    def vectors(self, store: InteractionStore) -> tuple[np.ndarray, np.ndarray]:
        per_domain = {d: read_vectors(p) for d, p in self.vector_paths.items() if d in store.domains}
        if not per_domain:
            raise StageError(f"no vector files for domains {store.domains}")
        return align_vectors(store, per_domain)

    @property
    def inputs(self) -> list[Path]:
        return [self.interactions_path, *self.vector_paths.values()]


def _corpus(cfg: RunConfig, outdir: Path) -> Corpus:
    data = cfg["data"]
    if data["interactions"]:
        inter = Path(data["interactions"])
        vdir = Path(data["vectors_dir"]) if data["vectors_dir"] else inter.parent
    else:
        inter = outdir / "synth" / "interactions.tsv"
        vdir = outdir / "synth"
        if not inter.exists():
            raise StageError(f"no interactions configured and {inter} is missing; run stage 'synth' first")
    if not inter.exists():
        raise StageError(f"interaction file not found: {inter}")
    store = ingest(inter)
    if data["min_interactions"]:
        store = filter_min_interactions(store, data["min_interactions"])
    paths = {d: vdir / f"vectors_{d}.tsv" for d in store.domains if (vdir / f"vectors_{d}.tsv").exists()}
    return Corpus(store, inter, paths)


def _pretrain_store(cfg: RunConfig, corpus: Corpus) -> InteractionStore:
    return select_domains(corpus.store, list(cfg["data"]["pretrain_domains"]))


def _target_store(cfg: RunConfig, corpus: Corpus) -> InteractionStore:
    return select_domains(corpus.store, [cfg["data"]["target_domain"]])


def seq_hyper(cfg: RunConfig) -> SeqHyper:
    return SeqHyper(**cfg["seqmodel"])


def cdim_hyper(cfg: RunConfig) -> CdimHyper:
    return CdimHyper(**cfg["cdim"])


def _json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _stage_dir(outdir: Path, stage: str) -> Path:
    d = outdir / stage
    d.mkdir(parents=True, exist_ok=True)
    return d


# --- stages -------------------------------------------------------------------

def run_synth(cfg: RunConfig, outdir: Path) -> list[Path]:
    s = cfg["synth"]
    spec = SynthSpec(s["num_clusters"], s["items_per_domain"], s["users_per_domain"], s["seq_len"],
                     s["concentration"], s["noise_scale"], s["vector_dim"], s["popularity_exponent"], s["domains"])
    corpus = synthesize_corpus(spec, cfg.seed)
    paths = corpus.write(_stage_dir(outdir, "synth"))
    return list(paths.values())


def run_pretrain(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    corpus = _corpus(cfg, outdir)
    store = _pretrain_store(cfg, corpus)
    d = _stage_dir(outdir, "pretrain")
    model, split, history = pretrain(store, seq_hyper(cfg), cfg.seed)
    save_model(model, d / "model.ckpt", {"domains": list(cfg["data"]["pretrain_domains"])})
    report = EvalReport.from_ranks(rank_users(model, split, "test"), {"seed": cfg.seed, "stage": "pretrain"})
    emit_report(report, d / "report.tsv", cfg["eval"]["format"])
    hist = _json(d / "history.json", {"losses": history.losses, "val_ndcg5": history.val_ndcg5,
                                       "best_epoch": history.best_epoch, "best_val": history.best_val})
    return corpus.inputs, [d / "model.ckpt", d / "report.tsv", hist]


def run_mine_positives(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    _require(outdir, "pretrain")
    src = outdir / "pretrain" / "model.ckpt"
    model = load_model(src)
    pos = mine_behavior_positives(model.E.detach().double().numpy(), cfg["cdim"]["k"], cfg["cdim"]["similarity"])
    d = _stage_dir(outdir, "mine_positives")
    out = d / "positives.ckpt"
    checkpoint.save(out, {"items": pos.items.astype(np.float64), "scores": pos.scores},
                    {"kind": "behavior-positives", "k": pos.k})
    return [src], [out]


def load_positives(path: Path) -> BehaviorPositives:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "behavior-positives":
        raise checkpoint.CheckpointError(f"{path} does not hold behavior positives")
    return BehaviorPositives(tensors["items"].astype(np.int64), tensors["scores"])


def run_tune_cdim(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    _require(outdir, "mine_positives")
    corpus = _corpus(cfg, outdir)
    store = _pretrain_store(cfg, corpus)
    vectors, present = corpus.vectors(store)
    if not present.all():
        logger.warning("tune_cdim: %d pre-training items lack a vector; zeros used", int((~present).sum()))
    src = outdir / "mine_positives" / "positives.ckpt"
    positives = load_positives(src)
    adapter, history = tune_cdim(TextVectorStore(vectors), positives, cdim_hyper(cfg), cfg.seed)
    d = _stage_dir(outdir, "tune_cdim")
    save_adapter(adapter, d / "adapter.ckpt")
    hist = _json(d / "history.json", {"train_loss": history.train_loss, "val_loss": history.val_loss,
                                       "best_epoch": history.best_epoch})
    return [src, *corpus.inputs], [d / "adapter.ckpt", hist]


def _use_ann(cfg: RunConfig, num_sources: int) -> bool:
    method = cfg["matcher"]["method"]
    return method == "ann" or (method == "auto" and num_sources > EXACT_LIMIT)


def run_build_index(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    _require(outdir, "tune_cdim")
    corpus = _corpus(cfg, outdir)
    store = _pretrain_store(cfg, corpus)
    vectors, present = corpus.vectors(store)
    src = outdir / "tune_cdim" / "adapter.ckpt"
    adapter = load_adapter(src)
    av = adapted(adapter, vectors).astype(np.float64)
    d = _stage_dir(outdir, "build_index")
    outputs = [d / "sources.ckpt"]
    checkpoint.save(outputs[0], {"vectors": av, "present": present.astype(np.float64)}, {"kind": "adapted-sources"})
    if _use_ann(cfg, int(present.sum())):
        m = cfg["matcher"]
        params = BuildParams(m["max_degree"], m["ef_construction"], m["ef_search"])
        index = build_index(av[present], params, cfg.seed, cfg["cdim"]["similarity"])
        save_index(index, d / "index.ckpt")
        outputs.append(d / "index.ckpt")
    return [src, *corpus.inputs], outputs


def run_gen_embeddings(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    _require(outdir, "pretrain")
    _require(outdir, "tune_cdim")
    idx_rec = _require(outdir, "build_index")
    corpus = _corpus(cfg, outdir)
    target = _target_store(cfg, corpus)
    tvec, tpresent = corpus.vectors(target)
    adapter_path = outdir / "tune_cdim" / "adapter.ckpt"
    adapter = load_adapter(adapter_path)
    tad = adapted(adapter, tvec).astype(np.float64)
    src_tensors, _ = checkpoint.load(outdir / "build_index" / "sources.ckpt")
    spresent = src_tensors["present"].astype(bool)
    source_ids = np.flatnonzero(spresent)
    model_path = outdir / "pretrain" / "model.ckpt"
    model = load_model(model_path)
    E_S = model.E.detach().double().numpy()
    m = cfg["matcher"]
    kwargs: dict = {"similarity": cfg["cdim"]["similarity"]}
    inputs = [model_path, adapter_path, outdir / "build_index" / "sources.ckpt", *corpus.inputs]
    if "build_index/index.ckpt" in idx_rec["outputs"]:
        index_path = outdir / "build_index" / "index.ckpt"
        kwargs.update(method="ann", index=load_index(index_path))
        inputs.append(index_path)
    else:
        kwargs["method"] = "exact"
    assignment = assign_neighbors(np.arange(target.num_items), tad, tpresent, source_ids,
                                  src_tensors["vectors"][spresent], m["m"], **kwargs)
    generated = generate_embeddings(assignment, E_S)
    d = _stage_dir(outdir, "gen_embeddings")
    generated.save(d / "E_T.ckpt", d / "provenance.tsv")
    tnames = [raw for _, raw in target.item_keys()]
    snames = [raw for _, raw in _pretrain_store(cfg, corpus).item_keys()]
    assignment.to_tsv(d / "neighbors.tsv", tnames, snames)
    return inputs, [d / "E_T.ckpt", d / "provenance.tsv", d / "neighbors.tsv"]


def _transfer_hyper(cfg: RunConfig, base: SeqHyper) -> SeqHyper:
    t = cfg["transfer"]
    h = SeqHyper(**{**base.to_dict(), "lr": t["lr"], "batch_size": t["batch_size"], "epochs": t["epochs"],
                    "patience": t["patience"]})
    if t["mode"] == "retrain-encoder":
        h.backend = t["backend"]
    return h


def run_deploy(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    _require(outdir, "pretrain")
    _require(outdir, "gen_embeddings")
    corpus = _corpus(cfg, outdir)
    target = _target_store(cfg, corpus)
    split = split_leave_one_out(target, cfg.seed)
    model_path = outdir / "pretrain" / "model.ckpt"
    gen_path = outdir / "gen_embeddings" / "E_T.ckpt"
    pretrained = load_model(model_path)
    targets, E_T = load_generated(gen_path)
    if not np.array_equal(targets, np.arange(target.num_items)):
        raise StageError("generated embeddings do not cover the target catalog; re-run 'gen_embeddings'")
    t = cfg["transfer"]
    mode = DeploymentMode(t["mode"], t["use_text"], t["text_projection"])
    d = _stage_dir(outdir, "deploy")
    outputs = []
    text = present = pca = None
    if mode.use_text:
        text, present = corpus.vectors(target)
        if mode.text_projection == "pca":
            pre_vec, pre_present = corpus.vectors(_pretrain_store(cfg, corpus))
            pca = fit_pca(pre_vec[pre_present], pretrained.hyper.dim)
            pca.save(d / "pca.ckpt")
            outputs.append(d / "pca.ckpt")
    model, history = deploy(mode, pretrained, E_T, split, _transfer_hyper(cfg, pretrained.hyper), cfg.seed,
                            text, present, pca)
    save_model(model, d / "model.ckpt", {"mode": mode.mode, "use_text": mode.use_text})
    outputs.append(d / "model.ckpt")
    hist = {"mode": mode.mode}
    if history is not None:
        hist.update(losses=history.losses, val_ndcg5=history.val_ndcg5, best_epoch=history.best_epoch)
    outputs.append(_json(d / "history.json", hist))
    return [model_path, gen_path, *corpus.inputs], outputs


def run_eval(cfg: RunConfig, outdir: Path) -> tuple[list[Path], list[Path]]:
    rec = _require(outdir, "deploy")
    corpus = _corpus(cfg, outdir)
    target = _target_store(cfg, corpus)
    split = split_leave_one_out(target, cfg.seed)
    model_path = outdir / "deploy" / "model.ckpt"
    model = load_model(model_path)
    ranks = rank_users(model, split, "test")
    meta = {"seed": cfg.seed, "mode": cfg["transfer"]["mode"], "use_text": cfg["transfer"]["use_text"],
            "checkpoint": rec["outputs"]["deploy/model.ckpt"][:16]}
    report = EvalReport.from_ranks(ranks, meta)
    d = _stage_dir(outdir, "eval")
    name = "report.tsv" if cfg["eval"]["format"] == "tsv" else "report.json"
    emit_report(report, d / name, cfg["eval"]["format"])
    write_ranks(report, split.users, d / "ranks.tsv")
    return [model_path, *corpus.inputs], [d / name, d / "ranks.tsv"]


RUNNERS: dict[str, Callable[[RunConfig, Path], tuple[list[Path], list[Path]]]] = {
    "pretrain": run_pretrain,
    "mine_positives": run_mine_positives,
    "tune_cdim": run_tune_cdim,
    "build_index": run_build_index,
    "gen_embeddings": run_gen_embeddings,
    "deploy": run_deploy,
    "eval": run_eval,
}


def run_stage(cfg: RunConfig, stage: str) -> list[Path]:
    outdir = cfg.outdir()
    outdir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(cfg.seed)
    start = time.perf_counter()
    if stage == "synth":
        outputs = run_synth(cfg, outdir)
        _record(outdir, "synth", [], outputs, time.perf_counter() - start)
        return outputs
    if stage not in RUNNERS:
        raise StageError(f"unknown stage {stage!r}")
    inputs, outputs = RUNNERS[stage](cfg, outdir)
    _record(outdir, stage, inputs, outputs, time.perf_counter() - start)
    logger.info("stage %s done in %.1fs", stage, time.perf_counter() - start)
    return outputs


def run_all(cfg: RunConfig, synth: bool | None = None) -> Path:
    """Every stage in order; runs ``synth`` first when no interaction file is configured."""
    if synth or (synth is None and not cfg["data"]["interactions"]):
        run_stage(cfg, "synth")
    for stage in STAGES:
        run_stage(cfg, stage)
    return cfg.outdir()
