"""Command-line front end tying the pipeline together.

Subcommands: ``extract-gop``, ``train``, ``eval``, ``predict``, ``ablate``,
``selftest``. Settings resolve in three layers (defaults, then a key=value
config file, then command-line flags, flags winning) and the fully resolved
configuration is echoed before any work, so a run is reproducible from its
log alone.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 numeric failure (non-finite loss, failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (
    Dataset,
    check_official_counts,
    generate_synthetic,
    load_inventory,
    load_alignment,
    load_manifest,
    load_posteriorgram,
    read_feature_file,
    write_feature_file,
    write_manifest,
    write_posteriorgram,
    SyntheticConfig,
)
from .errors import DataFormatError, GoptError, NumericError
from .features import PhonePosteriorgram, GopSequence, extract_utterance
from .metrics import (
    UTTERANCE_ASPECTS,
    WORD_ASPECTS,
    build_report,
    evaluate,
    predict_utterances,
)
from .model import ModelConfig, build_model, load_checkpoint, make_batch, save_checkpoint
from .train import TrainConfig, multitask_loss, make_targets, train_multiseed

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "on", "yes"):
        return True
    if lowered in ("0", "false", "off", "no"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(v) for v in text.split(",") if v.strip() != "")
    except ValueError as exc:
        raise UsageError(f"bad seed list {text!r}") from exc
    if not seeds:
        raise UsageError("seed list is empty")
    return seeds


def _parse_optional_int(text: str):
    return None if text.strip().lower() == "none" else int(text)


# key -> (converter, default); shared by config files and flag resolution
_SETTINGS = {
    "backbone": (str, "gopt"),
    "num_phones": (_parse_optional_int, None),
    "embed_dim": (int, 24),
    "num_layers": (int, 3),
    "num_heads": (int, 1),
    "ffn_dim": (_parse_optional_int, None),
    "max_phones": (int, 50),
    "dropout": (float, 0.0),
    "activation": (str, "relu"),
    "cls_positional": (_parse_bool, False),
    "phone_embedding": (_parse_bool, True),
    "lr0": (float, 1e-3),
    "batch_size": (int, 25),
    "epochs": (int, 100),
    "schedule": (str, "after"),
    "tasks": (str, "joint"),
    "seeds": (_parse_seeds, (0, 1, 2, 3, 4)),
    "eval_every": (int, 1),
}


def _load_config_file(path: Path) -> dict:
    values = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {text!r}")
        key, _, value = text.partition("=")
        key = key.strip()
        if key not in _SETTINGS:
            raise UsageError(f"{path}:{lineno}: unknown setting {key!r}")
        converter, _ = _SETTINGS[key]
        try:
            values[key] = converter(value.strip())
        except (ValueError, UsageError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _resolve_settings(args) -> dict:
    resolved = {key: default for key, (_, default) in _SETTINGS.items()}
    if getattr(args, "config", None):
        resolved.update(_load_config_file(Path(args.config)))
    for key in _SETTINGS:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_settings(resolved: dict, extra: dict | None = None) -> None:
    merged = dict(resolved)
    if extra:
        merged.update(extra)
    for key in sorted(merged):
        value = merged[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        print(f"config {key}={value}")


def _add_setting_flags(parser: _Parser) -> None:
    parser.add_argument("--config", help="key=value settings file ('#' comments)")
    parser.add_argument("--backbone", choices=("gopt", "lstm"))
    parser.add_argument("--num-phones", dest="num_phones", type=int)
    parser.add_argument("--embed-dim", dest="embed_dim", type=int)
    parser.add_argument("--num-layers", dest="num_layers", type=int)
    parser.add_argument("--num-heads", dest="num_heads", type=int)
    parser.add_argument("--ffn-dim", dest="ffn_dim", type=int)
    parser.add_argument("--max-phones", dest="max_phones", type=int)
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--activation", choices=("relu", "tanh"))
    parser.add_argument(
        "--cls-positional", dest="cls_positional", action="store_const", const=True
    )
    parser.add_argument(
        "--no-phone-embedding", dest="phone_embedding", action="store_const", const=False
    )
    parser.add_argument("--lr0", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--schedule", choices=("after", "from"))
    parser.add_argument("--tasks", choices=("joint", "phoneme", "word", "utterance"))
    parser.add_argument("--seeds", type=_parse_seeds)
    parser.add_argument("--eval-every", dest="eval_every", type=int)


def _model_config(resolved: dict, dataset: Dataset | None = None) -> ModelConfig:
    num_phones = resolved["num_phones"]
    if num_phones is None:
        if dataset is None:
            raise UsageError("num_phones must be given when no dataset is loaded")
        num_phones = dataset.num_phones_in_inventory
    return ModelConfig(
        num_phones=num_phones,
        embed_dim=resolved["embed_dim"],
        num_layers=resolved["num_layers"],
        num_heads=resolved["num_heads"],
        ffn_dim=resolved["ffn_dim"],
        max_phones=resolved["max_phones"],
        dropout=resolved["dropout"],
        activation=resolved["activation"],
        cls_positional=resolved["cls_positional"],
        use_phone_embedding=resolved["phone_embedding"],
    )


def _train_config(resolved: dict) -> TrainConfig:
    return TrainConfig(
        lr0=resolved["lr0"],
        batch_size=resolved["batch_size"],
        epochs=resolved["epochs"],
        schedule=resolved["schedule"],
        tasks=resolved["tasks"],
        seeds=resolved["seeds"],
        eval_every=resolved["eval_every"],
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_extract_gop(args) -> int:
    post_dir = Path(args.posteriors)
    align_dir = Path(args.alignments)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inventory = load_inventory(args.inventory)
    print(f"config inventory={args.inventory} phones={inventory.num_phones} "
          f"states={inventory.num_states}")
    post_files = sorted(post_dir.glob("*.post"))
    if not post_files:
        raise DataFormatError(f"no *.post files under {post_dir}")
    total_phones = 0
    for post_path in post_files:
        uid = post_path.stem
        align_path = align_dir / f"{uid}.ali"
        if not align_path.is_file():
            raise DataFormatError(f"utterance {uid!r}: alignment {align_path} missing")
        pg = load_posteriorgram(post_path)
        alignment = load_alignment(align_path)
        seq = extract_utterance(pg, alignment, inventory, utterance_id=uid)
        write_feature_file(out_dir / f"{uid}.gopf", seq)
        total_phones += len(seq)
    print(f"extracted {len(post_files)} utterances, {total_phones} phones -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = _resolve_settings(args)
    dataset = load_manifest(args.manifest)
    if args.expect_official:
        for problem in check_official_counts(dataset):
            print(f"warning: {problem}")
    model_cfg = _model_config(resolved, dataset)
    train_cfg = _train_config(resolved)
    _echo_settings(resolved, {"manifest": args.manifest, "out": args.out,
                              "num_phones": model_cfg.num_phones})
    for split in ("train", "test"):
        u, w, p = dataset.counts(split)
        print(f"data {split}: utterances={u} words={w} phones={p}")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    probe = build_model(model_cfg, backbone=resolved["backbone"], seed=0)
    print(f"model {resolved['backbone']}: parameters={probe.num_parameters()}")

    logs: dict[int, list[str]] = {seed: [] for seed in train_cfg.seeds}
    result = train_multiseed(
        model_cfg,
        dataset.pairs("train"),
        dataset.pairs("test"),
        train_cfg,
        backbone=resolved["backbone"],
        log_fn=lambda seed, line: logs[seed].append(line),
    )
    for run in result.runs:
        log_path = out_dir / f"seed{run.seed}.log"
        log_path.write_text("\n".join(logs[run.seed]) + "\n")
        ckpt_path = out_dir / f"seed{run.seed}.ckpt"
        save_checkpoint(run.model, ckpt_path)
        r = run.result
        print(
            f"seed {run.seed}: phoneme_pcc={r.phoneme_pcc:.6f} "
            f"word_total_pcc={r.word_pcc[2]:.6f} utterance_total_pcc={r.utterance_pcc[4]:.6f}"
        )
    (out_dir / "report.csv").write_text(result.report.to_csv())
    (out_dir / "report.txt").write_text(result.report.to_text() + "\n")
    print(result.report.to_text())
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_manifest(args.manifest)
    print(f"config checkpoint={args.checkpoint} manifest={args.manifest} "
          f"backbone={model.backbone} parameters={model.num_parameters()}")
    result = evaluate(model, dataset.pairs("test"))
    report = build_report([result])
    print(report.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    seq = read_feature_file(args.features)
    print(f"config checkpoint={args.checkpoint} features={args.features}")
    prediction = predict_utterances(model, [seq])[0]
    print(f"utterance {seq.utterance_id}")
    for i, (phone, score) in enumerate(zip(seq.canonical_phones, prediction.phone_scores)):
        print(f"phone\t{i}\tcanonical={int(phone)}\tscore={score:.4f}")
    for w in range(prediction.word_scores.shape[0]):
        cells = "\t".join(
            f"{aspect}={prediction.word_scores[w, j]:.4f}"
            for j, aspect in enumerate(WORD_ASPECTS)
        )
        print(f"word\t{w}\t{cells}")
    cells = "\t".join(
        f"{aspect}={prediction.utterance_scores[k]:.4f}"
        for k, aspect in enumerate(UTTERANCE_ASPECTS)
    )
    print(f"utterance\t{cells}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    resolved = _resolve_settings(args)
    dataset = load_manifest(args.manifest)
    base_cfg = _model_config(resolved, dataset)
    _echo_settings(resolved, {"manifest": args.manifest, "num_phones": base_cfg.num_phones})

    factors = []
    if args.grid_tasks:
        factors.append(("tasks", [t.strip() for t in args.grid_tasks.split(",")]))
    if args.grid_phn_embed:
        factors.append(
            ("phone_embedding", [_parse_bool(v) for v in args.grid_phn_embed.split(",")])
        )
    if args.grid_layers:
        factors.append(("num_layers", [int(v) for v in args.grid_layers.split(",")]))
    if args.grid_dims:
        factors.append(("embed_dim", [int(v) for v in args.grid_dims.split(",")]))
    if not factors:
        raise UsageError("ablate needs at least one of --grid-tasks/--grid-phn-embed/"
                         "--grid-layers/--grid-dims")

    cache: dict[tuple, tuple] = {}

    def run_setting(overrides: dict) -> tuple:
        merged = dict(resolved)
        merged.update(overrides)
        key = tuple(sorted((k, str(v)) for k, v in merged.items()))
        if key not in cache:
            model_cfg = _model_config(merged, dataset)
            train_cfg = _train_config(merged)
            out = train_multiseed(
                model_cfg,
                dataset.pairs("train"),
                dataset.pairs("test"),
                train_cfg,
                backbone=merged["backbone"],
            )
            rep = out.report
            metrics = tuple(
                (rep.row(task, "pcc").mean, rep.row(task, "pcc").std)
                for task in ("phoneme", "word.total", "utterance.total")
            )
            cache[key] = (metrics, merged["tasks"])
        return cache[key]

    header = f"{'setting':<28}{'phoneme':>16}{'word':>16}{'utterance':>16}"
    lines = [header]
    lines.append(_ablation_row("base*", *run_setting({})))
    for name, values in factors:
        for value in values:
            if value == resolved[name]:
                continue
            lines.append(_ablation_row(f"{name}={value}", *run_setting({name: value})))
    table = "\n".join(lines)
    print(table)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.txt").write_text(table + "\n")
    return EXIT_OK


def _ablation_row(label: str, metrics: tuple, tasks: str) -> str:
    # single-task settings train one granularity; the untrained columns
    # have no meaningful score and render as '-'
    names = ("phoneme", "word", "utterance")
    cells = ""
    for task_name, (mean, std) in zip(names, metrics):
        if tasks == "joint" or tasks == task_name:
            cells += f"{mean:>9.3f}±{std:<6.3f}"
        else:
            cells += f"{'-':>16}"
    return f"{label:<28}{cells}"


def cmd_selftest(args) -> int:
    failures_numeric: list[str] = []
    failures_data: list[str] = []

    def report(name: str, problems: list[str], bucket: list[str]) -> None:
        if problems:
            bucket.extend(f"{name}: {p}" for p in problems)
            print(f"selftest {name}: FAIL ({problems[0]})")
        else:
            print(f"selftest {name}: ok")

    # gradient checks on both backbones, toy scale; the fixed seeds keep
    # every ReLU pre-activation clear of the finite-difference step
    for backbone in ("gopt", "lstm"):
        rng = np.random.default_rng(2)
        cfg = ModelConfig(num_phones=6, embed_dim=8, num_layers=1, max_phones=6)
        model = build_model(cfg, backbone=backbone, seed=4)
        sequences, labels = _toy_batch(rng, cfg)
        batch = make_batch(sequences, cfg)
        targets = make_targets(batch, list(zip(sequences, labels)))

        def loss_fn():
            out = model.forward(batch)
            total, _ = multitask_loss(out, targets)
            return total

        problems = ad.check_gradients(loss_fn, model.parameters())
        report(f"gradients[{backbone}]", problems, failures_numeric)

    # format round-trips
    import tempfile

    rng = np.random.default_rng(7)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        seq = _random_sequence(rng, num_phones=5, length=7, uid="selftest")
        write_feature_file(tmp / "x.gopf", seq)
        back = read_feature_file(tmp / "x.gopf", utterance_id="selftest")
        ok = (
            np.array_equal(back.features, seq.features)
            and np.array_equal(back.canonical_phones, seq.canonical_phones)
            and np.array_equal(back.word_of_phone, seq.word_of_phone)
        )
        report("feature-roundtrip", [] if ok else ["bytes differ"], failures_data)

        probs = rng.dirichlet(np.ones(6), size=9)
        pg = PhonePosteriorgram(probs)
        write_posteriorgram(tmp / "x.post", pg)
        ok = np.array_equal(load_posteriorgram(tmp / "x.post").probs, pg.probs)
        report("posteriorgram-roundtrip", [] if ok else ["bytes differ"], failures_data)

        cfg = ModelConfig(num_phones=6, embed_dim=8, num_layers=1, max_phones=6)
        model = build_model(cfg, backbone="gopt", seed=3)
        save_checkpoint(model, tmp / "x.ckpt")
        loaded = load_checkpoint(tmp / "x.ckpt")
        ok = all(
            np.array_equal(loaded.params[k].data, v.data) for k, v in model.params.items()
        )
        report("checkpoint-roundtrip", [] if ok else ["parameters differ"], failures_data)

    # numeric sanity
    x = ad.tensor(rng.normal(size=(4, 9)))
    sums = ad.softmax_rows(x).data.sum(axis=1)
    ok = np.abs(sums - 1.0).max() < 1e-12
    report("softmax-rows", [] if ok else [f"row sums off by {np.abs(sums - 1).max():g}"],
           failures_numeric)

    if failures_numeric:
        return EXIT_NUMERIC
    if failures_data:
        return EXIT_DATA
    return EXIT_OK


def _random_sequence(rng, num_phones: int, length: int, uid: str) -> GopSequence:
    canon = rng.integers(0, num_phones, size=length)
    base = rng.uniform(-4.0, -0.05, size=(length, num_phones))
    feats = np.concatenate(
        [base, base - base[np.arange(length), canon][:, None]], axis=1
    )
    words = np.sort(rng.integers(0, max(1, length // 2), size=length))
    words = np.unique(words, return_inverse=True)[1]  # contiguous word ids
    return GopSequence(feats, canon, np.sort(words), utterance_id=uid)


def _toy_batch(rng, cfg: ModelConfig):
    from .metrics import ScoreLabels

    sequences, labels = [], []
    for i, length in enumerate((4, 6)):
        seq = _random_sequence(rng, cfg.num_phones, length, uid=f"toy{i}")
        w = seq.num_words
        labels.append(
            ScoreLabels(
                phone_accuracy=rng.uniform(0.2, 1.8, size=length),
                word_scores=rng.uniform(0.2, 1.8, size=(w, 3)),
                utterance_scores=rng.uniform(0.2, 1.8, size=5),
            )
        )
        sequences.append(seq)
    return sequences, labels


def cmd_synth(args) -> int:
    cfg = SyntheticConfig(
        num_train=args.num_train,
        num_test=args.num_test,
        num_phones=args.num_phones,
        noise_sigma=args.noise,
    )
    data = generate_synthetic(cfg, seed=args.seed)
    manifest = write_manifest(data.dataset, args.out)
    u_train = data.dataset.counts("train")
    u_test = data.dataset.counts("test")
    print(f"config seed={args.seed} num_train={cfg.num_train} num_test={cfg.num_test} "
          f"num_phones={cfg.num_phones} noise={cfg.noise_sigma}")
    print(f"wrote {manifest} (train {u_train}, test {u_test})")
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(
        prog="gopt",
        description="Multi-aspect, multi-granularity pronunciation scoring from "
        "GOP features: feature extraction, training, evaluation, and reporting. "
        "Settings resolve defaults -> --config file -> flags; every command "
        "echoes its resolved configuration before doing work. Exit codes: "
        "0 success, 1 usage error, 2 data/format error, 3 numeric failure.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-gop", help="posteriorgrams + alignments -> GOP feature files")
    p.add_argument("--posteriors", required=True, help="directory of *.post files")
    p.add_argument("--alignments", required=True, help="directory of *.ali files")
    p.add_argument("--inventory", required=True, help="phone inventory file")
    p.add_argument("--out", required=True, help="output directory for *.gopf files")
    p.set_defaults(func=cmd_extract_gop)

    p = sub.add_parser("train", help="train the scorer over multiple seeds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expect-official", action="store_true",
                   help="warn when split sizes differ from the official corpus")
    _add_setting_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="score one utterance from a feature file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="one-factor-at-a-time ablation grid")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--grid-tasks", help="e.g. joint,phoneme,word,utterance")
    p.add_argument("--grid-phn-embed", help="e.g. on,off")
    p.add_argument("--grid-layers", help="e.g. 3,6")
    p.add_argument("--grid-dims", help="e.g. 12,24,48,96")
    _add_setting_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="gradient checks and format round-trips")
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("synth", help="generate the synthetic planted-model corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-train", dest="num_train", type=int, default=500)
    p.add_argument("--num-test", dest="num_test", type=int, default=200)
    p.add_argument("--num-phones", dest="num_phones", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
