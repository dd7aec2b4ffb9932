#!/usr/bin/env python3
"""Smoke test for the Python bindings.

Builds nothing itself: expects `cargo build --release -p exembed-py` to have
produced the extension module, which is copied next to a temp dir and
imported. Run from the repository root:

    cargo build --release -p exembed-py
    python3 python/smoke_test.py
"""

import pathlib
import shutil
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def locate_extension():
    names = ["libexembed_py.so", "exembed_py.dll", "libexembed_py.dylib"]
    for profile in ["release", "debug"]:
        for name in names:
            cand = ROOT / "target" / profile / name
            if cand.exists():
                return cand
    sys.exit("extension not found; run `cargo build --release -p exembed-py` first")


def import_module():
    src = locate_extension()
    tmp = tempfile.mkdtemp(prefix="exembed_py_")
    suffix = ".pyd" if src.suffix == ".dll" else ".so"
    shutil.copy(src, pathlib.Path(tmp) / f"exembed_py{suffix}")
    sys.path.insert(0, tmp)
    import exembed_py

    return exembed_py


def main():
    xe = import_module()

    # tokenization round-trips exactly
    data = b"hello, long context"
    ids = xe.tokenize(data)
    assert xe.detokenize(ids) == data
    assert xe.VOCAB_SIZE == 259

    # a tiny model end to end
    cfg = xe.ModelConfig(
        vocab_size=259,
        model_dim=16,
        n_layers=2,
        n_heads=2,
        n_embedder_layers=1,
        max_window=64,
    )
    docs = xe.generate_corpus(
        6, generator="kv_recall", doc_len=256, kv_pairs_per_doc=3, seed=1
    )
    assert len(docs) == 6 and all(len(d) >= 256 for d in docs)

    model = xe.Model.pretrain(cfg, docs, steps=15, window=32, batch_size=2, seed=0)
    logits = model.logits(ids[:5])
    assert len(logits) == 5 and len(logits[0]) == 259

    # compression: ceil(chunk/k) rows per chunk, model_dim wide
    embedder = model.init_embedder()
    sets = embedder.compress(docs[0][:64], chunk_len=16, k=4)
    assert len(sets) == 4
    assert all(len(s) == 4 and len(s[0]) == cfg.model_dim for s in sets)

    # a few training steps run and report finite losses
    embedder, losses = xe.train_embedder(
        model, embedder, docs,
        k_candidates=[2, 4], train_chunk_size=8, sample_len=48,
        batch_size=2, max_steps=3, seed=0,
    )
    assert len(losses) == 3 and all(l == l for l in losses), losses

    # perplexity under compressed vs truncated context
    ppl_ext = xe.tail_perplexity(
        model, embedder, docs[0][:128], 128,
        method="ext_embedding", k=4, tail_len=16, chunk_len=16, recent_raw=16,
    )
    ppl_trunc = xe.tail_perplexity(
        model, embedder, docs[0][:128], 128,
        method="truncate", tail_len=16,
    )
    assert ppl_ext > 0 and ppl_trunc > 0

    # factor selection: raw fit -> None, otherwise smallest fitting k
    assert xe.select_scaling_factor(100, 10, 512, 64, [2, 4]) is None
    assert xe.select_scaling_factor(12288, 256, 4096, 4096, [2, 4, 8]) == 4

    # streaming session with condensation
    session = xe.Session(model, k=2, capacity=64, session_len=8)
    session.push(model, embedder, docs[0][:40])
    out = session.generate(model, embedder, 5)
    assert len(out) == 5
    assert session.condensations >= 4
    assert session.live_rows <= 64

    # checkpoints round-trip through files
    with tempfile.TemporaryDirectory() as tmp:
        model.save(pathlib.Path(tmp) / "base.ckpt")
        reloaded = xe.Model.load(pathlib.Path(tmp) / "base.ckpt")
        assert reloaded.logits(ids[:3]) == model.logits(ids[:3])

    print("smoke test passed:", len(docs), "docs,",
          f"ppl ext {ppl_ext:.2f} / truncate {ppl_trunc:.2f},",
          session.condensations, "condensations")


if __name__ == "__main__":
    main()
