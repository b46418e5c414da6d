"""Command-line entry point.

Every subcommand reads the same flat key-value configuration: built-in
defaults, then an optional YAML mapping (``--config``), then ``--<key>``
flags.  Unknown keys are rejected.  Commands that write files also write the
resolved configuration to ``<out>/config.yaml``.  All randomness derives from
the single ``seed`` key.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import data_io, evaluation, gan_trainer, maxent_il
from .numerics import derive_rng
from .seq_models import LinearEnergy, TabularGenerator, Vocabulary, energy_init, gen_init, sample_batch

REQUIRED = object()

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "out": (str, "run"),
    "data": (str, None),
    "heldout": (str, None),
    "oracle": (str, None),
    "checkpoint": (str, None),
    "vocab_size": (int, 5),
    "horizon": (int, 8),
    "concentration": (float, 1.0),
    "n_demos": (int, 1000),
    "n_heldout": (int, 200),
    "stride": (int, 1),
    "gen_kind": (str, "tabular"),
    "gen_order": (int, 1),
    "embed_dim": (int, 8),
    "hidden_dim": (int, 16),
    "energy_kind": (str, "linear"),
    "energy_embed_dim": (int, 8),
    "energy_hidden_dim": (int, 16),
    "margin": (float, REQUIRED),
    "lambda_entropy": (float, 1.0),
    "lr_g": (float, 0.1),
    "lr_d": (float, 0.05),
    "batch_size": (int, 32),
    "n_rollouts": (int, 16),
    "d_steps": (int, 1),
    "g_steps": (int, 1),
    "epochs": (int, 200),
    "baseline": (bool, True),
    "baseline_window": (int, 100),
    "pretrain_epochs": (int, 5),
    "lr_pretrain": (float, 1.0),
    "energy_warm_start": (bool, True),
    "early_stop": (bool, False),
    "oracle_eval_samples": (int, 2000),
    "il_lr": (float, 1.0),
    "il_max_rounds": (int, 2000),
    "il_tol": (float, 1e-3),
    "n_instances": (int, 20),
    "k": (int, 3),
    "n_generate": (int, 10),
    "prefix": (str, None),
}

# keys that must be given explicitly, per subcommand
REQUIRES = {"train-gan": ("margin",)}

COMMANDS = ("make-synthetic", "train-gan", "pretrain", "train-il", "check-equivalence",
            "eval", "recommend", "generate")


class ConfigError(Exception):
    pass


def _coerce(key: str, value):
    typ = SCHEMA[key][0]
    if value is None:
        return None
    if typ is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "yes", "on"):
            return True
        if str(value).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key '{key}' expects a boolean, got {value!r}")
    try:
        if typ is int and isinstance(value, float) and not value.is_integer():
            raise ValueError
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key '{key}' expects {typ.__name__}, got {value!r}") from None


def resolve_config(command: str, config_path: str | None, overrides: dict) -> dict:
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    layers = []
    if config_path:
        try:
            loaded = yaml.safe_load(Path(config_path).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc.strerror}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {config_path} must hold a key-value mapping")
        layers.append(loaded)
    layers.append(overrides)
    for layer in layers:
        for key, value in layer.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key '{key}'")
            cfg[key] = _coerce(key, value)
    for key in REQUIRES.get(command, ()):
        if cfg[key] is REQUIRED or cfg[key] is None:
            raise ConfigError(f"missing required config key '{key}'")
    return {k: (None if v is REQUIRED else v) for k, v in cfg.items()}


def _write_config(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = dict(cfg, command=command)
    (out / "config.yaml").write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")
    return out


def _need(cfg: dict, key: str) -> str:
    if not cfg[key]:
        raise ConfigError(f"missing required config key '{key}'")
    return cfg[key]


def _load_demos(cfg: dict, key: str = "data"):
    """Demo set, vocabulary and (optional) oracle for a data path."""
    path = _need(cfg, key)
    oracle = data_io.load_oracle(cfg["oracle"]) if cfg["oracle"] else None
    if path.endswith(".csv"):
        demos, vocab = data_io.ingest_sessions(path, cfg["horizon"], cfg["stride"])
        if oracle is not None and vocab.tokens != oracle.vocab.tokens:
            oracle = None  # ids assigned by first appearance need not match the oracle
        return demos, vocab, oracle
    if oracle is not None:
        vocab = oracle.vocab
    else:
        tokens = dict.fromkeys(Path(path).read_text(encoding="utf-8").split())
        vocab = Vocabulary(tuple(tokens))
    return data_io.read_sequences(path, vocab), vocab, oracle


def _gan_config(cfg: dict) -> gan_trainer.GanConfig:
    return gan_trainer.GanConfig(
        margin=cfg["margin"] if cfg["margin"] is not None else 1.0,
        lambda_entropy=cfg["lambda_entropy"], lr_g=cfg["lr_g"], lr_d=cfg["lr_d"],
        batch_size=cfg["batch_size"], n_rollouts=cfg["n_rollouts"], d_steps=cfg["d_steps"],
        g_steps=cfg["g_steps"], epochs=cfg["epochs"], horizon=cfg["horizon"],
        baseline_enabled=cfg["baseline"], baseline_window=cfg["baseline_window"],
        pretrain_epochs=cfg["pretrain_epochs"], lr_pretrain=cfg["lr_pretrain"],
        energy_warm_start=cfg["energy_warm_start"], early_stop=cfg["early_stop"],
        oracle_eval_samples=cfg["oracle_eval_samples"], seed=cfg["seed"])


def _new_generator(cfg: dict, V: int):
    return gen_init(cfg["gen_kind"], V, order=cfg["gen_order"], embed_dim=cfg["embed_dim"],
                    hidden_dim=cfg["hidden_dim"], seed=int(derive_rng(cfg["seed"], "gen-init").integers(2**63)))


def _new_energy(cfg: dict, V: int):
    return energy_init(cfg["energy_kind"], V, embed_dim=cfg["energy_embed_dim"],
                       hidden_dim=cfg["energy_hidden_dim"],
                       seed=int(derive_rng(cfg["seed"], "energy-init").integers(2**63)))


def _load_generator(cfg: dict):
    ck = data_io.load_checkpoint(_need(cfg, "checkpoint"))
    if not hasattr(ck.model, "complete"):
        raise ConfigError(f"{cfg['checkpoint']} does not hold a generator")
    vocab = ck.vocab or Vocabulary.synthetic(ck.model.vocab_size)
    return ck.model, vocab, ck.horizon or cfg["horizon"]


def _write_rows(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]) if rows else [], lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_synthetic(cfg):
    out = _write_config(cfg, "make-synthetic")
    oracle = data_io.make_markov_oracle(cfg["vocab_size"], cfg["seed"], cfg["concentration"])
    demos = data_io.sample_demos(oracle, cfg["n_demos"], cfg["horizon"],
                                 int(derive_rng(cfg["seed"], "demos").integers(2**63)))
    heldout = data_io.sample_demos(oracle, cfg["n_heldout"], cfg["horizon"],
                                   int(derive_rng(cfg["seed"], "heldout").integers(2**63)))
    data_io.save_oracle(oracle, out / "oracle.json")
    data_io.write_sequences(demos.seqs, oracle.vocab, out / "demos.txt")
    data_io.write_sequences(heldout.seqs, oracle.vocab, out / "heldout.txt")
    print(f"wrote {len(demos)} demos and {len(heldout)} held-out sequences to {out}")
    return 0


def cmd_train_gan(cfg):
    demos, vocab, oracle = _load_demos(cfg)
    out = _write_config(cfg, "train-gan")
    gcfg = _gan_config(cfg)
    gen, e = _new_generator(cfg, len(vocab)), _new_energy(cfg, len(vocab))
    state = gan_trainer.train(gen, e, demos.seqs, gcfg, oracle=oracle)
    data_io.save_checkpoint(state.gen, out / "generator.json", horizon=cfg["horizon"], vocab=vocab,
                            seed=cfg["seed"])
    data_io.save_checkpoint(state.energy, out / "energy.json", horizon=cfg["horizon"], vocab=vocab,
                            seed=cfg["seed"])
    data_io.write_metrics(state.history, out / "metrics.csv")
    last = state.history[-1] if state.history else {}
    print(f"trained {state.iteration} rounds; final feature gap {last.get('feature_gap')}, "
          f"oracle NLL {last.get('oracle_nll')}")
    return 0


def cmd_pretrain(cfg):
    demos, vocab, _ = _load_demos(cfg)
    out = _write_config(cfg, "pretrain")
    hist = []
    gen = gan_trainer.pretrain_mle(_new_generator(cfg, len(vocab)), demos.seqs, cfg["pretrain_epochs"],
                                   cfg["lr_pretrain"], history=hist)
    data_io.save_checkpoint(gen, out / "generator.json", horizon=cfg["horizon"], vocab=vocab,
                            seed=cfg["seed"])
    _write_rows(out / "pretrain_nll.csv", [{"epoch": i + 1, "nll": v} for i, v in enumerate(hist)])
    print(f"pretrained {len(hist)} epochs; demo NLL {hist[-1] if hist else float('nan')}")
    return 0


def cmd_train_il(cfg):
    demos, vocab, _ = _load_demos(cfg)
    out = _write_config(cfg, "train-il")
    il_cfg = maxent_il.ILConfig(horizon=demos.horizon, lr=cfg["il_lr"], max_rounds=cfg["il_max_rounds"],
                                tol=cfg["il_tol"])
    c, q, hist = maxent_il.two_step_solve(demos, il_cfg, len(vocab))
    data_io.save_checkpoint(c, out / "cost.json", horizon=demos.horizon, vocab=vocab, seed=cfg["seed"])
    data_io.save_checkpoint(q, out / "policy.json", horizon=demos.horizon, vocab=vocab, seed=cfg["seed"])
    _write_rows(out / "il_history.csv", hist)
    print(f"{len(hist)} rounds; final feature gap {hist[-1]['feature_gap']:.3g}")
    return 0


def equivalence_instances(n: int, seed: int):
    """Random small (generator, energy, real, fake) instances for the check."""
    rng = derive_rng(seed, "equivalence")
    for _ in range(n):
        V = int(rng.integers(2, 4))
        T = int(rng.integers(2, 5))
        gen = TabularGenerator(V, 1, rng.standard_normal(V + V * V))
        e = LinearEnergy(V, rng.standard_normal(V + V * V))
        real = rng.integers(0, V, size=(int(rng.integers(4, 20)), T))
        fake = sample_batch(gen, int(rng.integers(4, 20)), T, rng)[0]
        yield gen, e, real, fake


def cmd_check_equivalence(cfg):
    out = _write_config(cfg, "check-equivalence")
    rows, ok = [], True
    for i, (gen, e, real, fake) in enumerate(equivalence_instances(cfg["n_instances"], cfg["seed"])):
        fe = e.energies(fake)
        hi = maxent_il.gan_il_equivalence_check(gen, e, real, float(fe.max()) + 1.0, fake=fake)
        lo = maxent_il.gan_il_equivalence_check(gen, e, real, float(fe.min()) - 1.0, fake=fake)
        drop_err = float(np.max(np.abs(lo.dropped_term - lo.fake_feature_mean)))
        passed = (hi.step_discrepancy < 1e-12 and hi.policy_discrepancy < 1e-10
                  and drop_err < 1e-12 and lo.regime == "saturated")
        ok &= passed
        rows.append({"instance": i, "V": gen.vocab_size, "T": real.shape[1],
                     "a_inactive_margin": hi.step_discrepancy, "b_policy": hi.policy_discrepancy,
                     "c_dropped_minus_fake_mean": drop_err, "passed": passed})
        print(f"instance {i:2d}  (a) {hi.step_discrepancy:.2e}  (b) {hi.policy_discrepancy:.2e}  "
              f"(c) {drop_err:.2e}  {'ok' if passed else 'FAIL'}")
    _write_rows(out / "equivalence.csv", rows)
    if not ok:
        print("error: GAN/IL equivalence discrepancy above tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_eval(cfg):
    gen, vocab, T = _load_generator(cfg)
    out = _write_config(cfg, "eval")
    report = {}
    if cfg["oracle"]:
        oracle = data_io.load_oracle(cfg["oracle"])
        rng = derive_rng(cfg["seed"], "eval")
        for direction in ("forward", "reverse"):
            report[f"oracle_nll_{direction}"] = evaluation.oracle_nll(
                gen, oracle, T, direction, n=cfg["oracle_eval_samples"], rng=rng)
        report["oracle_entropy"] = evaluation.sequence_entropy(oracle.as_generator(), T)
    data_path = cfg["heldout"] or cfg["data"]
    if data_path:
        demos, dvocab, _ = _load_demos(dict(cfg, data=data_path))
        if dvocab.tokens != vocab.tokens:
            demos = data_io.DemoSet(np.array([vocab.encode(dvocab.decode(s)) for s in demos.seqs]),
                                    len(vocab))
        report[f"hit_at_{cfg['k']}"] = evaluation.hit_at_k(gen, demos, cfg["k"])
        report["heldout_nll"] = gan_trainer.mean_nll(gen, demos.seqs)
        if isinstance(gen, TabularGenerator) and gen.order == 1:
            report["feature_gap"] = evaluation.feature_gap(gen, demos, len(vocab), T)
    (out / "eval.json").write_text(json.dumps(report, indent=1), encoding="utf-8")
    print(json.dumps(report))
    return 0


def cmd_recommend(cfg):
    gen, vocab, _ = _load_generator(cfg)
    text = cfg["prefix"] if cfg["prefix"] is not None else sys.stdin.readline()
    tokens = [t.strip() for t in text.strip().split(",") if t.strip()]
    try:
        prefix = vocab.encode(tokens)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from None
    for item, p in evaluation.recommend_topk(gen, prefix, cfg["k"]):
        print(f"{vocab.tokens[item]}\t{p:.6f}")
    return 0


def cmd_generate(cfg):
    gen, vocab, T = _load_generator(cfg)
    seqs, _ = sample_batch(gen, cfg["n_generate"], T, derive_rng(cfg["seed"], "generate"))
    data_io.write_sequences(seqs, vocab, stream=sys.stdout)
    return 0


HANDLERS = {
    "make-synthetic": cmd_make_synthetic,
    "train-gan": cmd_train_gan,
    "pretrain": cmd_pretrain,
    "train-il": cmd_train_il,
    "check-equivalence": cmd_check_equivalence,
    "eval": cmd_eval,
    "recommend": cmd_recommend,
    "generate": cmd_generate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebseqgan", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML file of key: value settings")
        group = p.add_argument_group("settings (override the config file)")
        for key in SCHEMA:
            group.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None, metavar="VALUE")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        if argv and argv[0] in ("-h", "--help"):
            parser.print_help()
            return 0
        parser.print_usage(sys.stderr)
        print(f"error: unknown command {argv[0]!r}" if argv else "error: no command given",
              file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {k: v for k, v in vars(args).items() if k in SCHEMA and v is not None}
    try:
        cfg = resolve_config(args.command, args.config, overrides)
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, FloatingPointError, data_io.CheckpointError) as exc:
        detail = f"{exc.strerror}: {exc.filename}" if isinstance(exc, OSError) and exc.filename else exc
        print(f"error: {detail}", file=sys.stderr)
        return 1


run = main

if __name__ == "__main__":
    sys.exit(main())
