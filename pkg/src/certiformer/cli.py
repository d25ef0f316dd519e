"""Command-line entry point: ``certiformer certify|importance|ablate|gen-fixture``.

Every command builds a JSON-serialisable report first; ``--format table``
renders that report, it never recomputes anything.

Exit codes: 0 success (including misclassified inputs, flagged in the
report), 2 configuration error, 3 model or vocabulary error.
"""
from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .bounds import norm_name, parse_norm
from .engine import METHOD_NAMES, METHODS, parse_method
from .errors import CertiformerError, ConfigError, EmptyInput, Misclassified
from .io import (
    VocabTable,
    generate_fixture,
    load_model,
    load_vocab,
    require_tokens,
    tokenize,
    weights_checksum,
)
from .model import LN_MODES, Hyper, forward_eval
from .verifier import SearchConfig, importance_ranking, verify

EXIT_OK, EXIT_CONFIG, EXIT_MODEL = 0, 2, 3
COMMANDS = ("certify", "importance", "ablate", "gen-fixture")


@dataclass
class RunConfig:
    """Validated settings for one invocation. JSON config files use these keys."""

    model: str | None = None
    vocab: str | None = None
    text: list[str] = field(default_factory=list)
    input_file: str | None = None
    p: str = "2"
    t: int = 1
    positions: list[int] | None = None
    method: str = "bf"
    methods: list[str] = field(default_factory=lambda: ["ff", "fb", "bf"])
    p_norms: list[str] = field(default_factory=lambda: ["1", "2", "inf"])
    eps_max: float = 10.0
    rel_tol: float = 1e-3
    max_iter: int = 30
    max_sets: int = 128
    seed: int = 0
    threads: int = 1
    label: int | None = None
    upper: bool = False
    timing: bool = False
    format: str = "json"
    out: str | None = None
    # gen-fixture
    num_layers: int = 1
    num_heads: int = 2
    d_model: int = 8
    d_ff: int = 16
    max_len: int = 32
    vocab_size: int = 64
    num_classes: int = 2
    layernorm: str = "modified"

    def validate(self, command: str) -> None:
        try:
            parse_norm(self.p)
            for p in self.p_norms:
                parse_norm(p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        try:
            self.method = parse_method(self.method)
            self.methods = [parse_method(m) for m in self.methods]
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.t < 1:
            raise ConfigError("t must be >= 1")
        if self.max_sets < 1:
            raise ConfigError("max_sets must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.format not in ("json", "table"):
            raise ConfigError(f"format must be 'json' or 'table', got {self.format!r}")
        if self.layernorm not in LN_MODES:
            raise ConfigError(f"layernorm must be one of {LN_MODES}")
        try:
            self.search()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if command == "gen-fixture":
            if not self.out:
                raise ConfigError("gen-fixture needs an output directory (--out)")
            try:
                self.hyper()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            return
        if not self.model:
            raise ConfigError("no model given (--model)")
        if not self.text and not self.input_file:
            raise ConfigError("no input given (--text or --input-file)")
        if self.positions is not None and command == "certify":
            if not self.positions or any(int(r) < 1 for r in self.positions):
                raise ConfigError("positions are 1-based and must be non-empty")

    def search(self) -> SearchConfig:
        return SearchConfig(self.eps_max, self.rel_tol, self.max_iter)

    def hyper(self) -> Hyper:
        return Hyper(self.num_layers, self.num_heads, self.d_model, self.d_ff, self.max_len,
                     self.vocab_size, self.num_classes, self.layernorm)


CONFIG_KEYS = {f.name for f in fields(RunConfig)}


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    if isinstance(data.get("text"), str):
        data["text"] = [data["text"]]
    return data


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="certiformer", description="Certified robustness bounds for small Transformer classifiers.")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON file with RunConfig keys; command-line flags override it")
        sp.add_argument("--model", default=S, help="model directory or model.json")
        sp.add_argument("--vocab", default=S, help="vocab.tsv (default: next to the manifest)")
        sp.add_argument("--text", action="append", default=S, help="input sentence (repeatable)")
        sp.add_argument("--input-file", dest="input_file", default=S,
                        help="one input per line, optionally 'label<TAB>text'")
        sp.add_argument("--label", type=int, default=S, help="gold label (default: clean prediction)")
        sp.add_argument("--eps-max", dest="eps_max", type=float, default=S)
        sp.add_argument("--rel-tol", dest="rel_tol", type=float, default=S)
        sp.add_argument("--max-iter", dest="max_iter", type=int, default=S)
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--threads", type=int, default=S)
        sp.add_argument("--timing", action="store_true", default=S, help="include wall-clock timings")
        sp.add_argument("--format", choices=("json", "table"), default=S)
        sp.add_argument("--out", default=S, help="write the report here instead of stdout")

    c = sub.add_parser("certify", help="certified radius for every position set")
    common(c)
    c.add_argument("--p", default=S, help="1, 2 or inf")
    c.add_argument("--t", type=int, default=S, help="positions perturbed together")
    c.add_argument("--method", default=S, choices=METHODS)
    c.add_argument("--max-sets", dest="max_sets", type=int, default=S)
    c.add_argument("--positions", type=lambda s: [int(v) for v in s.split(",")], default=S,
                   help="certify only this 1-based position set, e.g. 1,3")
    c.add_argument("--upper", action="store_true", default=S, help="also report substitution upper bounds")

    i = sub.add_parser("importance", help="rank words by certified radius")
    common(i)
    i.add_argument("--p", default=S)
    i.add_argument("--method", default=S, choices=METHODS)

    a = sub.add_parser("ablate", help="compare bounding methods")
    common(a)
    a.add_argument("--p", dest="p_norms", action="append", default=S, help="norm to include (repeatable)")
    a.add_argument("--t", type=int, default=S)
    a.add_argument("--methods", type=lambda s: s.split(","), default=S, help="comma list, default ff,fb,bf")
    a.add_argument("--max-sets", dest="max_sets", type=int, default=S)

    g = sub.add_parser("gen-fixture", help="write a seeded random model, manifest and vocabulary")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--out", default=S, help="output directory")
    g.add_argument("--num-layers", dest="num_layers", type=int, default=S)
    g.add_argument("--num-heads", dest="num_heads", type=int, default=S)
    g.add_argument("--d-model", dest="d_model", type=int, default=S)
    g.add_argument("--d-ff", dest="d_ff", type=int, default=S)
    g.add_argument("--max-len", dest="max_len", type=int, default=S)
    g.add_argument("--vocab-size", dest="vocab_size", type=int, default=S)
    g.add_argument("--num-classes", dest="num_classes", type=int, default=S)
    g.add_argument("--layernorm", default=S, choices=LN_MODES)
    g.add_argument("--format", choices=("json", "table"), default=S)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if getattr(args, "config", None) else {}
    cli = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    values.update(cli)
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate(args.command)
    return cfg


# ---------------------------------------------------------------- inputs


class ModelLoadError(Exception):
    """Model or vocabulary could not be loaded (exit code 3)."""


@dataclass
class Inputs:
    model: object
    vocab: VocabTable
    texts: list[tuple[str, int | None]]
    model_sha256: str


def _read_inputs(cfg: RunConfig) -> list[tuple[str, int | None]]:
    items: list[tuple[str, int | None]] = [(t, cfg.label) for t in cfg.text]
    if cfg.input_file:
        try:
            lines = Path(cfg.input_file).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read input file: {exc}") from None
        for line in lines:
            if not line.strip():
                continue
            if "\t" in line:
                lab, text = line.split("\t", 1)
                try:
                    items.append((text, int(lab)))
                except ValueError:
                    raise ConfigError(f"bad label {lab!r} in input file") from None
            else:
                items.append((line, cfg.label))
    if not items:
        raise ConfigError("input file holds no texts")
    return items


def load_inputs(cfg: RunConfig) -> Inputs:
    texts = _read_inputs(cfg)
    try:
        model = load_model(cfg.model)
        mdir = Path(cfg.model) if Path(cfg.model).is_dir() else Path(cfg.model).parent
        vocab = load_vocab(cfg.vocab or mdir / "vocab.tsv")
    except FileNotFoundError as exc:
        raise ModelLoadError(f"missing file: {exc.filename}") from None
    except CertiformerError as exc:
        raise ModelLoadError(str(exc)) from None
    if len(vocab) != model.hyper.vocab_size:
        raise ModelLoadError(f"vocabulary has {len(vocab)} rows, model expects {model.hyper.vocab_size}")
    for _, lab in texts:
        if lab is not None and not 0 <= lab < model.hyper.num_classes:
            raise ConfigError(f"label {lab} outside [0, {model.hyper.num_classes})")
    return Inputs(model, vocab, texts, weights_checksum(mdir))



def _token_ids(text: str, inputs: Inputs) -> list[int]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ids = tokenize(text, inputs.vocab, inputs.model.hyper.max_len)
    return require_tokens(ids)


def _finite(v):
    return v if v is None or np.isfinite(v) else None


def _settings(cfg: RunConfig, command: str) -> dict:
    base = {"eps_max": cfg.eps_max, "rel_tol": cfg.rel_tol, "max_iter": cfg.max_iter, "seed": cfg.seed}
    if command == "certify":
        base.update(p=norm_name(parse_norm(cfg.p)), t=cfg.t, method=METHOD_NAMES[cfg.method],
                    max_sets=cfg.max_sets, positions=cfg.positions)
    elif command == "importance":
        base.update(p=norm_name(parse_norm(cfg.p)), method=METHOD_NAMES[cfg.method])
    elif command == "ablate":
        base.update(p_norms=[norm_name(parse_norm(p)) for p in cfg.p_norms], t=cfg.t,
                    methods=[METHOD_NAMES[m] for m in cfg.methods], max_sets=cfg.max_sets)
    return base


def _instance_header(text, inputs: Inputs, ids, label) -> dict:
    logits = forward_eval(inputs.model, ids)
    pred = int(np.argmax(logits))
    return {
        "text": text,
        "tokens": [inputs.vocab.tokens[i] for i in ids],
        "token_ids": list(ids),
        "label": pred if label is None else label,
        "prediction": pred,
        "misclassified": label is not None and pred != label,
    }


# ---------------------------------------------------------------- commands


def cmd_certify(cfg: RunConfig) -> dict:
    inputs = load_inputs(cfg)
    out = []
    for text, label in inputs.texts:
        ids = _token_ids(text, inputs)
        row = _instance_header(text, inputs, ids, label)
        if not row["misclassified"]:
            sets = None
            if cfg.positions is not None:
                if max(cfg.positions) > len(ids):
                    raise ConfigError(f"position {max(cfg.positions)} beyond input length {len(ids)}")
                sets = [tuple(cfg.positions)]
            elif cfg.t > len(ids):
                raise ConfigError(f"t={cfg.t} exceeds input length {len(ids)}")
            rep = verify(inputs.model, ids, cfg.p, cfg.t, cfg.method, sets, cfg.max_sets, cfg.search(),
                         row["label"], cfg.upper, cfg.threads)
            body = rep.to_dict(timing=cfg.timing)
            for s in body["sets"]:
                s["positions_words"] = [row["tokens"][r - 1] for r in s["positions"]]
            row.update({k: body[k] for k in ("sets", "min", "avg", "truncated")})
            if cfg.timing:
                row["seconds"] = body["seconds"]
        out.append(row)
    return {"command": "certify", "model_sha256": inputs.model_sha256,
            "settings": _settings(cfg, "certify"), "instances": out}


def cmd_importance(cfg: RunConfig) -> dict:
    inputs = load_inputs(cfg)
    out = []
    for text, label in inputs.texts:
        ids = _token_ids(text, inputs)
        row = _instance_header(text, inputs, ids, label)
        if not row["misclassified"]:
            r = importance_ranking(inputs.model, ids, cfg.p, cfg.method, cfg.search(), row["tokens"],
                                   row["label"])
            row["scores"] = {"ours": r.scores, "upper": [_finite(v) for v in r.upper_scores],
                             "gradient": r.gradient_norms}
            row["rankings"] = {k: getattr(r, k) for k in ("ours", "upper", "gradient")}
            row["most_important"] = {k: row["tokens"][getattr(r, k)[0] - 1] for k in ("ours", "upper", "gradient")}
            row["least_important"] = {k: row["tokens"][getattr(r, k)[-1] - 1] for k in ("ours", "upper", "gradient")}
        out.append(row)
    return {"command": "importance", "model_sha256": inputs.model_sha256,
            "settings": _settings(cfg, "importance"), "instances": out}


def cmd_ablate(cfg: RunConfig) -> dict:
    inputs = load_inputs(cfg)
    out = []
    for text, label in inputs.texts:
        ids = _token_ids(text, inputs)
        row = _instance_header(text, inputs, ids, label)
        if not row["misclassified"]:
            t = min(cfg.t, len(ids))
            results = []
            for p in cfg.p_norms:
                entry = {"p": norm_name(parse_norm(p)), "methods": {}}
                for m in cfg.methods:
                    rep = verify(inputs.model, ids, p, t, m, max_sets=cfg.max_sets, search=cfg.search(),
                                 label=row["label"], threads=cfg.threads)
                    cell = {
                        "min": rep.min_epsilon,
                        "avg": rep.avg_epsilon,
                        "lambda_entries": int(sum(e.lambda_entries for e in rep.entries)),
                        "omega_entries": int(sum(e.omega_entries for e in rep.entries)),
                    }
                    if cfg.timing:
                        cell["seconds"] = rep.seconds
                    entry["methods"][METHOD_NAMES[m]] = cell
                results.append(entry)
            row["results"] = results
        out.append(row)
    return {"command": "ablate", "model_sha256": inputs.model_sha256,
            "settings": _settings(cfg, "ablate"), "instances": out}


def cmd_gen_fixture(cfg: RunConfig) -> dict:
    generate_fixture(cfg.seed, cfg.hyper(), cfg.out)
    return {"command": "gen-fixture", "seed": cfg.seed, "hyper": asdict(cfg.hyper()),
            "directory": str(cfg.out), "model_sha256": weights_checksum(cfg.out)}


# ---------------------------------------------------------------- rendering


def render_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _table(header: list[str], rows: list[list]) -> str:
    cells = [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[k]) for r in cells)) if cells else len(h) for k, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(line.rstrip() for line in lines)


def render_table(report: dict) -> str:
    cmd = report["command"]
    if cmd == "gen-fixture":
        return _table(["seed", "directory", "sha256"],
                      [[report["seed"], report["directory"], report["model_sha256"]]]) + "\n"
    blocks = []
    for inst in report["instances"]:
        title = f"{inst['text']!r}  label={inst['label']} prediction={inst['prediction']}"
        if inst["misclassified"]:
            blocks.append(title + "  MISCLASSIFIED")
            continue
        if cmd == "certify":
            rows = [[",".join(map(str, s["positions"])), " ".join(s["positions_words"]),
                     s["certified_epsilon"], s.get("upper_bound")] for s in inst["sets"]]
            body = _table(["positions", "words", "certified_eps", "upper"], rows)
            body += f"\nmin {_fmt(inst['min'])}  avg {_fmt(inst['avg'])}"
            if inst["truncated"]:
                body += "  (position sets truncated)"
        elif cmd == "importance":
            rows = [[k, inst["most_important"][k], inst["least_important"][k],
                     " ".join(inst["tokens"][r - 1] for r in inst["rankings"][k])]
                    for k in ("ours", "upper", "gradient")]
            body = _table(["ranking", "most", "least", "order"], rows)
        else:
            rows = []
            for entry in inst["results"]:
                for m, cell in entry["methods"].items():
                    rows.append([entry["p"], m, cell["min"], cell["avg"], cell.get("seconds"),
                                 cell["lambda_entries"], cell["omega_entries"]])
            body = _table(["p", "method", "min", "avg", "seconds", "lambda", "omega"], rows)
        blocks.append(title + "\n" + body)
    return "\n\n".join(blocks) + "\n"


HANDLERS = {
    "certify": cmd_certify,
    "importance": cmd_importance,
    "ablate": cmd_ablate,
    "gen-fixture": cmd_gen_fixture,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = resolve_config(args)
        report = HANDLERS[args.command](cfg)
    except (ConfigError, EmptyInput) as exc:
        print(f"certiformer: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ModelLoadError as exc:
        print(f"certiformer: model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except Misclassified as exc:
        print(f"certiformer: {exc}", file=sys.stderr)
        return EXIT_OK
    text = render_table(report) if cfg.format == "table" else render_json(report)
    if cfg.out and args.command != "gen-fixture":
        Path(cfg.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
