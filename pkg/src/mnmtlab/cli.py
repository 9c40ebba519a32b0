"""Command-line entry point: ``mnmtlab <command> ...``.

Every command writes a ``manifest.json`` next to its outputs. Exit codes:
0 success, 2 configuration error, 3 data error, 4 numeric failure,
5 resume mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import config as cfgmod
from .corpus import CorpusSpec, generate_corpus
from .errors import ConfigError, DataError, MnmtError
from .experiment import Experiment
from .metrics import ReportWriter, read_report
from .optim import Checkpoint, load_checkpoint, save_checkpoint
from .report import find_reports, merge_reports, write_run_chart
from .search import run_search

MANIFEST_VERSION = 1


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hashes(root):
    root = Path(root)
    return {str(p.relative_to(root)): file_sha256(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "manifest.json"}


def lineage_hash(parent, ckpt):
    """Chained hash: parent's lineage followed by this checkpoint's content."""
    return hashlib.sha256(((parent or "") + ckpt.content_hash()).encode()).hexdigest()


class RunManifest:
    def __init__(self, run_id, command, argv, config):
        self.data = {"version": MANIFEST_VERSION, "run_id": run_id, "command": command, "argv": list(argv),
                     "config": config, "inputs": {}, "outputs": {}, "lineage": None,
                     "started": datetime.now(timezone.utc).isoformat(), "finished": None}

    def add_input(self, path):
        p = Path(path)
        if p.is_dir():
            for rel, h in tree_hashes(p).items():
                self.data["inputs"][str(p / rel)] = h
        else:
            self.data["inputs"][str(p)] = file_sha256(p)

    def add_output(self, path):
        self.data["outputs"][str(path)] = file_sha256(path)

    def write(self, out_dir, **extra):
        self.data.update(extra)
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --------------------------------------------------------------------------
# helpers


def _overrides(args):
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    for item in args.set or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = out
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def _load_config(args):
    return cfgmod.load(args.config, overrides=_overrides(args))


def _experiment(args, cfg):
    if args.data is not None and not (Path(args.data) / "corpus.json").exists():
        raise DataError(f"{args.data}: not a generated corpus directory (missing corpus.json)")
    return Experiment(cfg, data_dir=args.data)


def _load_ckpt(path):
    if not Path(path).exists():
        raise DataError(f"{path}: no such checkpoint")
    return load_checkpoint(path)


def _log(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr, flush=True)


def _summary_line(step, report, pair, domain):
    src, tgt = pair
    parts = [f"step {step}", f"generic mean {report.mean():.2f}"]
    if (src, tgt, domain) in report.bleu:
        parts.append(f"{src}-{tgt} {domain} {report.score((src, tgt, domain)):.2f}")
    return "  ".join(parts)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    bundled = args.spec == "toy" and not Path(args.spec).exists()
    try:
        text = cfgmod.builtin(args.spec) if bundled else Path(args.spec).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"{args.spec}: no such spec file") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.spec}:{e.lineno}: invalid JSON: {e.msg}") from None
    if isinstance(raw, dict) and "corpus" in raw:
        cfg = cfgmod.resolve(raw, overrides=_overrides(args))
        spec, seed = cfg["corpus"], cfg["seed"]
    else:
        spec, seed = raw, (args.seed if args.seed is not None else 0)
    spec = CorpusSpec.from_dict(spec)
    if args.dry_run:
        print(json.dumps({"spec": spec.to_dict(), "seed": seed}, indent=2))
        return 0
    out = Path(args.out)
    manifest = RunManifest(out.name, "gen-data", sys.argv[1:], {"corpus": spec.to_dict(), "seed": seed})
    if not bundled:
        manifest.add_input(args.spec)
    vocab, datasets = generate_corpus(spec, seed, out_dir=out)
    for rel, h in tree_hashes(out).items():
        manifest.data["outputs"][str(out / rel)] = h
    manifest.write(out)
    _log(args, f"wrote {len(datasets)} files ({sum(len(d) for d in datasets.values())} pairs, "
               f"{len(vocab)} vocabulary entries) to {out}")
    return 0


def cmd_pretrain(args):
    cfg = _load_config(args)
    x = _experiment(args, cfg)
    if args.dry_run:
        x.model_config()
        x.pretrain_config()
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    out = Path(args.out)
    manifest = RunManifest(args.run_id or out.name, "pretrain", sys.argv[1:], cfg)
    if args.data:
        manifest.add_input(args.data)
    writer = ReportWriter(out / "report.csv", args.run_id or out.name)
    pair, domain = x.pair, x.domain

    def on_eval(step, report):
        writer.write(step, report)
        _log(args, _summary_line(step, report, pair, domain))

    ckpt = x.pretrain(on_eval=on_eval)
    ckpt.meta["lineage"] = lineage_hash(None, ckpt)
    path = save_checkpoint(out / "model.mnmt", ckpt)
    manifest.add_output(path)
    manifest.add_output(out / "report.csv")
    manifest.write(out, lineage=ckpt.meta["lineage"])
    return 0


def cmd_finetune(args):
    cfg = _load_config(args)
    ft = cfg["finetune"]
    if args.lr is not None:
        ft["lr"] = args.lr
    if args.steps is not None:
        ft["steps"] = args.steps
    if args.freeze is not None:
        ft["freeze"] = args.freeze
    x = _experiment(args, cfg)
    parent = _load_ckpt(args.checkpoint)
    if args.pde != "none":
        parent.config.with_pde(args.pde).validate()
    if len(x.vocab) != parent.config.vocab_size:
        raise ConfigError(f"checkpoint vocab_size={parent.config.vocab_size} does not match "
                          f"the corpus vocabulary ({len(x.vocab)})")
    trainer = x.trainer(smart=args.smart, pde_mode=args.pde)
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    out = Path(args.out)
    run_id = args.run_id or out.name
    manifest = RunManifest(run_id, "finetune", sys.argv[1:], {**cfg, "smart_enabled": args.smart, "pde": args.pde})
    manifest.add_input(args.checkpoint)
    if args.data:
        manifest.add_input(args.data)
    evaluator = x.evaluator("valid")
    writer = ReportWriter(out / "report.csv", run_id)
    base = evaluator(parent)
    writer.write(0, base)
    _log(args, _summary_line(0, base, x.pair, x.domain))
    state = trainer.begin(parent, ft["lr"], ft["freeze"], ft["steps"])
    done = 0
    while done < ft["steps"]:
        n = min(ft["eval_every"], ft["steps"] - done)
        trainer.advance(state, n)
        done += n
        report = evaluator(trainer.snapshot(state))
        writer.write(done, report)
        _log(args, _summary_line(done, report, x.pair, x.domain))
    ckpt = trainer.snapshot(state)
    ckpt.meta["lineage"] = lineage_hash(parent.meta.get("lineage"), ckpt)
    path = save_checkpoint(out / "model.mnmt", ckpt)
    manifest.add_output(path)
    manifest.add_output(out / "report.csv")
    manifest.write(out, lineage=ckpt.meta["lineage"])
    return 0


def cmd_search(args):
    cfg = _load_config(args)
    x = _experiment(args, cfg)
    search_cfg = x.search_config()
    pretrained = _load_ckpt(args.checkpoint)
    trainer = x.trainer(smart=args.smart)
    if args.dry_run:
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return 0
    out = Path(args.out)
    manifest = RunManifest(args.run_id or out.name, "search", sys.argv[1:], cfg)
    manifest.add_input(args.checkpoint)
    if args.data:
        manifest.add_input(args.data)
    ledger = out / "ledger.jsonl"
    t0 = time.time()
    result = run_search(pretrained, search_cfg, trainer, x.evaluator("valid"), ledger=ledger,
                        resume=args.resume, jobs=args.jobs)
    summary = result.summary()
    summary["trials"] = [{"index": t.index, "lr": t.lr, "freeze": t.freeze, "stop_reason": t.stop_reason,
                          "points": len(t.points)} for t in result.trials]
    summary["seconds"] = round(time.time() - t0, 3)
    best = result.checkpoint
    if best is not None:
        best = Checkpoint(best.config, best.params, best.step, best.seed, dict(best.meta), None)
        best.meta["lineage"] = lineage_hash(pretrained.meta.get("lineage"), best)
        path = save_checkpoint(out / "best.mnmt", best)
        manifest.add_output(path)
    (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    manifest.add_output(ledger)
    manifest.write(out, lineage=None if best is None else best.meta["lineage"])
    if result.no_improvement:
        print("no improvement found: every trial violated the thresholds; returning the pretrained model")
    else:
        print(f"best: lr={result.lr:g} freeze={result.freeze} step={result.best.step} "
              f"domain BLEU={result.best.domain_bleu:.2f} delta1={result.best.delta1:.2f} "
              f"delta2={result.best.delta2:.2f}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    x = _experiment(args, cfg)
    ckpt = _load_ckpt(args.checkpoint)
    testsets = x.testsets(args.split)
    if not testsets:
        raise DataError(f"corpus has no {args.split!r} split")
    if args.dry_run:
        return 0
    report = x.evaluator(args.split)(ckpt)
    for (src, tgt, dom), b in sorted(report.bleu.items()):
        print(f"{src}-{tgt}\t{dom}\t{b.score:.2f}")
    print(f"generic mean\t{report.mean():.2f}")
    if args.out:
        out = Path(args.out)
        ReportWriter(out / "report.csv", args.run_id or out.name).write(ckpt.step, report)
        manifest = RunManifest(args.run_id or out.name, "eval", sys.argv[1:], cfg)
        manifest.add_input(args.checkpoint)
        manifest.add_output(out / "report.csv")
        manifest.write(out)
    return 0


def cmd_report(args):
    paths = find_reports(args.runs)
    if args.dry_run:
        for p in paths:
            print(p)
        return 0
    out = Path(args.out)
    rows = merge_reports(paths, out / "merged.csv")
    charts = []
    for p in paths:
        run_rows = read_report(p)
        pair, domain = ("aa", "bb"), "medical"
        mf = p.parent / "manifest.json"
        if mf.exists():
            ft = json.loads(mf.read_text(encoding="utf-8")).get("config", {}).get("finetune", {})
            pair, domain = tuple(ft.get("pair", pair)), ft.get("domain", domain)
        run_id = run_rows[0]["run_id"] if run_rows else p.parent.name
        svg = out / f"{p.parent.name}.svg"
        write_run_chart(run_rows, pair, domain, svg, f"{run_id}: {pair[0]}-{pair[1]} {domain}")
        charts.append(svg)
    manifest = RunManifest(out.name, "report", sys.argv[1:], {"runs": str(args.runs)})
    for p in paths:
        manifest.add_input(p)
    manifest.add_output(out / "merged.csv")
    for c in charts:
        manifest.add_output(c)
    manifest.write(out)
    _log(args, f"merged {len(rows)} rows from {len(paths)} runs into {out / 'merged.csv'}")
    return 0


# --------------------------------------------------------------------------
# parser


def _global_flags(p, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--seed", type=int, help="override the config seed", **(kw or {"default": None}))
    p.add_argument("--jobs", type=int, help="parallel search trials", **(kw or {"default": 1}))
    p.add_argument("--dry-run", action="store_true", help="validate inputs and exit without writing", **kw)
    p.add_argument("--quiet", action="store_true", **kw)


def build_parser():
    p = argparse.ArgumentParser(prog="mnmtlab", description="Toy multilingual NMT domain adaptation lab.")
    _global_flags(p, suppress=False)
    # accept the global flags after the subcommand too
    shared = argparse.ArgumentParser(add_help=False)
    _global_flags(shared, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)
    add = sub.add_parser

    def add_parser(name, **kw):
        return add(name, parents=[shared], **kw)

    sub.add_parser = add_parser

    def common(sp, data=True):
        sp.add_argument("--config", default="toy", help="config JSON file or a bundled name (default: toy)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--run-id", default=None)
        if data:
            sp.add_argument("--data", default=None, help="corpus directory from gen-data (default: generate)")

    g = sub.add_parser("gen-data", help="generate a synthetic parallel corpus")
    g.add_argument("spec", help="corpus spec JSON, or a full config with a 'corpus' section")
    g.add_argument("out", help="output directory")
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", help="train the generic multilingual model")
    common(s)
    s.add_argument("--out", required=True, help="run directory")
    s.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="fine-tune a checkpoint on the domain pair")
    common(f)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--out", required=True, help="run directory")
    f.add_argument("--smart", action="store_true", help="use adversarial smoothness regularization")
    f.add_argument("--pde", default="none", choices=["none", "penultimate_all", "penultimate_attention_only"])
    f.add_argument("--freeze", default=None, help="freeze spec, e.g. encoder-embeddings")
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--steps", type=int, default=None)
    f.set_defaults(func=cmd_finetune)

    r = sub.add_parser("search", help="learning-rate search with retention thresholds")
    common(r)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True, help="run directory (ledger, result, best checkpoint)")
    r.add_argument("--resume", action="store_true", help="reuse finished trials from an existing ledger")
    r.add_argument("--smart", action="store_true")
    r.set_defaults(func=cmd_search)

    e = sub.add_parser("eval", help="BLEU of a checkpoint on every direction")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=["valid", "test"])
    e.add_argument("--out", default=None, help="optional run directory for a report CSV")
    e.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="merge report CSVs and draw one SVG per run")
    rp.add_argument("runs", help="directory containing run directories")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("gen-data", "report"):
        args.data = getattr(args, "data", None)
        args.run_id = None
    try:
        return args.func(args)
    except MnmtError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
