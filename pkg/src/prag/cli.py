"""Command-line entry points for the offline and online phases.

Subcommands: gen-corpus, pretrain, index, parameterize, warmup, query,
serve, eval, cost. A JSON config file supplies defaults; flags win. Every
run echoes its resolved settings so results are reproducible.
"""

import argparse
import json
import multiprocessing
import os
import sys
from pathlib import Path

from . import adapters as adapters_mod
from . import augment as augment_mod
from . import evaluation as eval_mod
from . import model as model_mod
from . import retriever as retriever_mod
from . import store as store_mod
from . import trainer as trainer_mod
from .errors import ConfigError, PragError
from .pipeline import Mode, Pipeline
from .service import QueryService

_CONFIG_SCHEMA = {
    "paths": {"corpus", "base", "index", "store", "reports"},
    "model": {"n_layers", "hidden", "ffn_intermediate", "n_heads", "max_seq_len"},
    "adapter": {"rank", "alpha", "scaling_mode"},
    "train": {"learning_rate", "epochs", "optimizer", "grad_clip_norm"},
    "augment": {"n", "m", "kind", "endpoint_url", "endpoint_model"},
    "retrieval": {"k1", "b", "k"},
    "seeds": {"corpus", "pretrain", "adapter"},
}

_DEFAULT_CONFIG = {
    "paths": {"corpus": "corpus.jsonl", "base": "base.ckpt", "index": "index.json",
              "store": "parametric", "reports": "reports"},
    "model": {"n_layers": 4, "hidden": 128, "ffn_intermediate": 512,
              "n_heads": 4, "max_seq_len": 512},
    "adapter": {"rank": 2, "alpha": 32.0, "scaling_mode": "alpha_over_r"},
    "train": {"learning_rate": 3e-4, "epochs": 1, "optimizer": "adamw",
              "grad_clip_norm": 1.0},
    "augment": {"n": 1, "m": 3, "kind": "rule", "endpoint_url": "", "endpoint_model": ""},
    "retrieval": {"k1": 1.2, "b": 0.75, "k": 3},
    "seeds": {"corpus": 0, "pretrain": 0, "adapter": 0},
}


def load_config(path=None) -> dict:
    config = json.loads(json.dumps(_DEFAULT_CONFIG))
    if path:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
        for section, values in user.items():
            if section not in _CONFIG_SCHEMA:
                raise ConfigError(f"unknown config section {section!r}")
            for key, value in values.items():
                if key not in _CONFIG_SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                config[section][key] = value
    root = os.environ.get("PRAG_ROOT")
    if root:
        config["paths"]["store"] = root
    return config


def _echo(config: dict, overrides: dict) -> None:
    resolved = {**config, "overrides": overrides}
    print("resolved-config: " + json.dumps(resolved, sort_keys=True))


def _model_config(config) -> model_mod.ModelConfig:
    m = config["model"]
    return model_mod.ModelConfig(n_layers=m["n_layers"], hidden=m["hidden"],
                                 ffn_intermediate=m["ffn_intermediate"],
                                 n_heads=m["n_heads"], max_seq_len=m["max_seq_len"])


def _adapter_config(config) -> adapters_mod.AdapterConfig:
    a = config["adapter"]
    return adapters_mod.AdapterConfig(rank=a["rank"], alpha=a["alpha"],
                                      scaling_mode=a["scaling_mode"])


def _train_hyper(config, seed) -> trainer_mod.TrainHyper:
    t = config["train"]
    return trainer_mod.TrainHyper(learning_rate=t["learning_rate"], epochs=t["epochs"],
                                  optimizer=t["optimizer"],
                                  grad_clip_norm=t["grad_clip_norm"], seed=seed)


def _build_pipeline(config) -> Pipeline:
    corpus = retriever_mod.Corpus.from_jsonl(config["paths"]["corpus"])
    index_path = Path(config["paths"]["index"])
    if index_path.exists():
        index = retriever_mod.load_index(index_path)
    else:
        index = retriever_mod.build_index(corpus, config["retrieval"]["k1"],
                                          config["retrieval"]["b"])
    base = model_mod.load_checkpoint(config["paths"]["base"])
    store = store_mod.ParametricCorpus(config["paths"]["store"])
    return Pipeline(corpus=corpus, index=index, base=base, store=store,
                    adapter_config=_adapter_config(config),
                    k=config["retrieval"]["k"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args, config) -> int:
    world = augment_mod.gen_synthetic_corpus(args.docs, args.triples, args.seed)
    world.corpus.to_jsonl(args.out)
    print(f"wrote {len(world.corpus)} docs to {args.out}")
    if args.qa_out:
        with open(args.qa_out, "w", encoding="utf-8") as fh:
            for doc_id, pairs in world.heldout_qa.items():
                for question, answer in pairs:
                    fh.write(json.dumps({"question": question, "answers": [answer],
                                         "doc_id": f"{doc_id:016x}"}) + "\n")
        print(f"wrote held-out QA to {args.qa_out}")
    if args.pretrain_out:
        text, _ = augment_mod.build_pretrain_text(
            args.pretrain_docs, args.triples, args.pretrain_seed,
            exclude_entities=world.entities)
        Path(args.pretrain_out).write_text(text, encoding="utf-8")
        print(f"wrote pretraining text ({len(text)} bytes) to {args.pretrain_out}")
    return 0


def cmd_pretrain(args, config) -> int:
    text = Path(args.text).read_text(encoding="utf-8")
    model_config = _model_config(config)
    params, losses = model_mod.pretrain_base(
        text, model_config, steps=args.steps, seed=args.seed,
        lr=args.lr, batch_size=args.batch_size, log_every=args.log_every)
    model_mod.save_checkpoint(params, args.out)
    print(f"pretrained {args.steps} steps, final window loss "
          f"{sum(losses[-50:]) / len(losses[-50:]):.4f}, "
          f"fingerprint {params.fingerprint:016x}, saved {args.out}")
    return 0


def cmd_index(args, config) -> int:
    corpus = retriever_mod.Corpus.from_jsonl(args.corpus)
    index = retriever_mod.build_index(corpus, k1=args.k1, b=args.b)
    retriever_mod.save_index(index, args.out)
    print(f"indexed {index.doc_count} docs, {len(index.postings)} terms -> {args.out}")
    return 0


_WORKER_STATE = {}


def _parameterize_worker_init(base_path, config_json):
    _WORKER_STATE["base"] = model_mod.load_checkpoint(base_path)
    _WORKER_STATE["config"] = json.loads(config_json)


def _parameterize_one(payload):
    record = json.loads(payload)
    config = _WORKER_STATE["config"]
    base = _WORKER_STATE["base"]
    doc = retriever_mod.Document(doc_id=int(record["doc_id"], 16),
                                 title=record["title"], text=record["text"])
    dataset = augment_mod.build_dataset(doc, n=config["augment"]["n"],
                                        m=config["augment"]["m"],
                                        seed=config["seeds"]["adapter"])
    adapter_config = adapters_mod.AdapterConfig(**config["adapter"])
    hyper = trainer_mod.TrainHyper(
        learning_rate=config["train"]["learning_rate"], epochs=config["train"]["epochs"],
        optimizer=config["train"]["optimizer"],
        grad_clip_norm=config["train"]["grad_clip_norm"], seed=config["seeds"]["adapter"])
    if record.get("warmup_path"):
        with open(record["warmup_path"], "rb") as fh:
            warm = adapters_mod.deserialize(fh.read())
        init = trainer_mod.reseed_adapter(warm, doc.doc_id)
    else:
        init = adapters_mod.new_random(adapter_config, base, doc.doc_id,
                                       seed=config["seeds"]["adapter"])
    trained, report = trainer_mod.train_adapter(base, dataset, init, hyper)
    return json.dumps({
        "doc_id": f"{doc.doc_id:016x}",
        "final_loss": report.final_loss,
        "tokens": report.tokens,
        "seconds": report.seconds,
        "adapter_blob": adapters_mod.serialize(trained).hex(),
        "augmented": dataset.to_dict(),
    })


def cmd_parameterize(args, config) -> int:
    corpus = retriever_mod.Corpus.from_jsonl(args.corpus or config["paths"]["corpus"])
    store = store_mod.ParametricCorpus(args.store or config["paths"]["store"])
    base = model_mod.load_checkpoint(args.base or config["paths"]["base"])

    selected = corpus.docs
    if args.doc_ids:
        wanted = {int(h, 16) for h in args.doc_ids.split(",")}
        selected = [d for d in selected if d.doc_id in wanted]
    fingerprint_hex = f"{base.fingerprint:016x}"
    pending = []
    stale = set()
    for doc in selected:
        entry = store.entry(doc.doc_id)
        if entry is not None:
            if entry["model_fingerprint"] == fingerprint_hex and not args.overwrite:
                continue  # resumable: this (doc, fingerprint) is already stored
            stale.add(doc.doc_id)
        pending.append(json.dumps({"doc_id": f"{doc.doc_id:016x}", "title": doc.title,
                                   "text": doc.text, "warmup_path": args.warmup or ""}))
    print(f"parameterizing {len(pending)} of {len(selected)} docs "
          f"(jobs={args.jobs}, skipped {len(selected) - len(pending)} existing)")

    config_json = json.dumps(config)
    base_path = args.base or config["paths"]["base"]
    if args.jobs > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(args.jobs, initializer=_parameterize_worker_init,
                      initargs=(base_path, config_json)) as pool:
            results = pool.map(_parameterize_one, pending)
    else:
        _parameterize_worker_init(base_path, config_json)
        results = [_parameterize_one(p) for p in pending]

    manifest_path = Path(args.manifest_out) if args.manifest_out else store.root / "train_manifest.jsonl"
    with open(manifest_path, "a", encoding="utf-8") as fh:
        for payload in results:
            record = json.loads(payload)
            adapter = adapters_mod.deserialize(bytes.fromhex(record.pop("adapter_blob")))
            entry = store.put(adapter,
                              overwrite=args.overwrite or adapter.doc_id in stale)
            store.put_augmented(augment_mod.AugmentedDataset.from_dict(record.pop("augmented")),
                                overwrite=True)
            record["adapter_path"] = entry["adapter_path"]
            fh.write(json.dumps(record) + "\n")
    print(f"stored {len(results)} adapters under {store.root}; manifest {manifest_path}")
    return 0


def cmd_warmup(args, config) -> int:
    base = model_mod.load_checkpoint(args.base or config["paths"]["base"])
    if args.qa:
        items = eval_mod.load_qa_jsonl(args.qa)
        pairs = [(item.question, item.gold_answers[0]) for item in items]
    else:
        exclude = set()
        if args.exclude_corpus:
            corpus = retriever_mod.Corpus.from_jsonl(args.exclude_corpus)
            for doc in corpus.docs:
                exclude.add(doc.title)
                for triple in augment_mod.extract_triples(doc.text):
                    exclude.update((triple.subject, triple.object))
        pairs = augment_mod.gen_warmup_qa(args.pairs, seed=args.seed,
                                          exclude_entities=exclude)
    hyper = _train_hyper(config, args.seed)
    adapter = trainer_mod.warmup_init(base, pairs, hyper,
                                      adapter_config=_adapter_config(config))
    Path(args.out).write_bytes(adapters_mod.serialize(adapter))
    print(f"warm-up adapter trained on {len(pairs)} pairs -> {args.out}")
    return 0


def cmd_query(args, config) -> int:
    pipeline = _build_pipeline(config)
    result = pipeline.answer(args.question, Mode.parse(args.mode), k=args.k)
    print(json.dumps(result.to_dict(), indent=2, ensure_ascii=False))
    return 0


def cmd_serve(args, config) -> int:
    host = os.environ.get("PRAG_BIND", args.host)
    service = QueryService(host=host, port=args.port)
    service.start()
    print(f"listening on {service.host}:{service.port} (loading pipeline)")
    service.set_pipeline(_build_pipeline(config))
    print("pipeline ready")
    try:
        service._thread.join()
    except KeyboardInterrupt:
        service.stop()
    return 0


def cmd_eval(args, config) -> int:
    pipeline = _build_pipeline(config)
    items = eval_mod.load_qa_jsonl(args.qa)
    modes = [Mode.parse(name) for name in args.modes.split(",")]
    report = eval_mod.run_benchmark(items, modes, pipeline, k=args.k,
                                    oracle_retrieval=args.oracle)
    reports_dir = Path(config["paths"]["reports"])
    reports_dir.mkdir(parents=True, exist_ok=True)
    eval_mod.write_report(report, reports_dir / "eval.json", reports_dir / "eval.txt")
    print(report.summary_table())
    print(f"full report: {reports_dir / 'eval.json'}")
    return 0


def cmd_cost(args, config) -> int:
    params, size = store_mod.storage_estimate(args.layers, args.hidden, args.ffn,
                                              args.rank, args.bytes)
    print(f"storage: {params:,} params, {size:,} bytes ({size / 1e6:.2f} MB) per document")
    if args.doc_tokens is not None:
        breakdown = store_mod.compute_cost_estimate(args.doc_tokens)
        print("compute (token-equivalents): " + json.dumps(breakdown))
        saving = store_mod.online_saving_estimate(args.q_tokens, args.doc_tokens, args.t)
        print("online per-query input tokens: " + json.dumps(saving))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prag",
                                     description="parametric retrieval-augmented generation")
    parser.add_argument("--config", help="JSON config file (flags win)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic corpus plus held-out QA")
    p.add_argument("--docs", type=int, default=64)
    p.add_argument("--triples", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="corpus.jsonl")
    p.add_argument("--qa-out", default="qa.jsonl")
    p.add_argument("--pretrain-out", default="")
    p.add_argument("--pretrain-docs", type=int, default=240)
    p.add_argument("--pretrain-seed", type=int, default=1)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="pretrain the base model on a text file")
    p.add_argument("--text", required=True)
    p.add_argument("--out", default="base.ckpt")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--log-every", type=int, default=200)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("index", help="build the BM25 index")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", default="index.json")
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("parameterize", help="augment and train adapters for corpus docs")
    p.add_argument("--corpus")
    p.add_argument("--base")
    p.add_argument("--store")
    p.add_argument("--doc-ids", help="comma-separated hex ids (default: all)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--overwrite", action="store_true")
    p.add_argument("--warmup", help="warm-up adapter file to use as init")
    p.add_argument("--manifest-out")
    p.set_defaults(func=cmd_parameterize)

    p = sub.add_parser("warmup", help="train the warm-up init adapter")
    p.add_argument("--base")
    p.add_argument("--out", default="warmup.pra")
    p.add_argument("--pairs", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--qa", help="JSONL QA file (default: synthetic pairs)")
    p.add_argument("--exclude-corpus", help="corpus whose entities must not appear")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("query", help="answer one question")
    p.add_argument("--question", required=True)
    p.add_argument("--mode", default="parametric")
    p.add_argument("--k", type=int, default=None)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("serve", help="run the HTTP query service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("eval", help="run the QA benchmark across modes")
    p.add_argument("--qa", required=True)
    p.add_argument("--modes", default="closed_book,in_context,parametric,combined")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--oracle", action="store_true",
                   help="force each item's source doc as the retrieved set")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="storage and compute estimators")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--hidden", type=int, required=True)
    p.add_argument("--ffn", type=int, required=True)
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--bytes", type=int, default=2)
    p.add_argument("--doc-tokens", type=int, default=None)
    p.add_argument("--q-tokens", type=int, default=0)
    p.add_argument("--t", type=int, default=3)
    p.set_defaults(func=cmd_cost)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        _echo(config, {k: v for k, v in vars(args).items()
                       if k not in ("func", "config") and v is not None})
        return args.func(args, config)
    except PragError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
