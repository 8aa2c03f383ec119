"""Experiment harness: synth / train / eval / ablate / params.

Every command is deterministic given config + seed; reruns produce
byte-identical CSVs and checkpoints. Exit codes: 0 success, 2 config or
usage validation, 3 artifact (digest) mismatch, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .checkpoint import (
    KIND_DELTA,
    KIND_FULL,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from .config import ExperimentConfig, load_config
from .errors import ArtifactMismatchError, ConfigError, NumericalAbortError
from .model import (
    AdapterConfig,
    ModelConfig,
    architecture_digest,
    build_model,
    insert_adapters,
    top_n_layers,
)
from .synthdata import Dataset, generate_role, load_dataset, save_dataset, split_dataset
from .train import Schedule, TrainConfig, evaluate, run_training
from .transfer import (
    ADAPTER_MODES,
    DELTA_MODES,
    TransferPolicy,
    count_params,
    count_params_config,
    delta_checkpoint_size_config,
    storage_projection,
)


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.override_seed(args.seed)
    return cfg


def _check_data_matches(ds: Dataset, mc: ModelConfig) -> None:
    if ds.spec.vocab_size != mc.vocab_size:
        raise ConfigError(
            f"data.vocab_size {ds.spec.vocab_size} does not match model.vocab_size {mc.vocab_size}"
        )
    if ds.spec.d_in != mc.input_dim:
        raise ConfigError(
            f"data.d_in {ds.spec.d_in} does not match the model input width {mc.input_dim}"
        )


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    spec = cfg.synth_spec()
    ds = generate_role(spec, cfg.language_role())
    save_dataset(ds, args.out)
    total_frames = sum(u.true_length for u in ds.utterances)
    print(f"wrote {args.out}: {len(ds)} utterances, {total_frames} frames, vocab {spec.vocab_size}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    cfg.require("model", "transfer", "train")
    mc = cfg.model_config()
    ac = cfg.adapter_config(mc.num_layers)
    policy = cfg.transfer_policy()
    tc = cfg.train_config()
    if policy.mode in ADAPTER_MODES and ac is None:
        raise ConfigError(f"transfer.mode {policy.mode} needs an [adapter] section")

    ds = load_dataset(args.data)
    _check_data_matches(ds, mc)
    train_utts, eval_utts = split_dataset(ds, cfg.values["train"]["eval_fraction"])

    model = build_model(mc, None, tc.seed)
    if args.base:
        load_checkpoint(model, args.base, expect_kind=KIND_FULL)
    elif policy.mode in DELTA_MODES:
        # make the delta loadable later: stash the pre-transfer base
        save_checkpoint(model, str(args.out) + ".base", KIND_FULL)
    if ac is not None:
        insert_adapters(model, ac, tc.seed)

    metrics_path = args.metrics or str(args.out) + ".metrics.csv"
    eval_rows: list[tuple[int, str, float]] = []
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(f"# config_digest: {cfg.digest()}\n")
        fh.write("step,loss,lr,grad_norm\n")
        wrote_eval_header = False

        def on_step(step, rep):
            fh.write(f"{step},{rep.loss!r},{rep.lr!r},{rep.grad_norm!r}\n")

        def on_eval(step, split, wer_value):
            nonlocal wrote_eval_header
            if not wrote_eval_header:
                fh.write("# eval rows: step,split,wer\n")
                wrote_eval_header = True
            fh.write(f"{step},{split},{wer_value!r}\n")
            eval_rows.append((step, split, wer_value))

        reports = run_training(
            model,
            train_utts,
            tc,
            eval_utts=eval_utts or None,
            eval_every=cfg.values["train"]["eval_every"],
            on_step=on_step,
            on_eval=on_eval,
        )

    kind = KIND_DELTA if policy.mode in DELTA_MODES else KIND_FULL
    save_checkpoint(model, args.out, kind)
    print(f"final_loss {reports[-1].loss!r}")
    if eval_rows:
        print(f"final_wer {eval_rows[-1][2]!r}")
    print(f"checkpoint {args.out}")
    print(f"metrics {metrics_path}")
    return 0


def _restore_model(cfg: ExperimentConfig, checkpoint_path: str, base_path: str | None):
    """Rebuild the model state a checkpoint was saved from."""
    mc = cfg.model_config()
    ac = cfg.adapter_config(mc.num_layers)
    seed = cfg.values["train"]["seed"] if cfg.has("train") else 0
    kind, digest = read_header(checkpoint_path)
    bare = architecture_digest(mc, None)
    adapted = architecture_digest(mc, ac) if ac is not None else None
    if digest == bare:
        with_adapters = False
    elif adapted is not None and digest == adapted:
        with_adapters = True
    else:
        raise ArtifactMismatchError(
            f"{checkpoint_path}: digest matches neither the configured model nor "
            "its adapter variant"
        )
    model = build_model(mc, None, seed)
    if kind == KIND_DELTA:
        if not base_path:
            raise ConfigError("--base full checkpoint is required to load a delta checkpoint")
        load_checkpoint(model, base_path, expect_kind=KIND_FULL)
        if with_adapters:
            insert_adapters(model, ac, seed)
        load_checkpoint(model, checkpoint_path, expect_kind=KIND_DELTA)
    else:
        if with_adapters:
            insert_adapters(model, ac, seed)
        load_checkpoint(model, checkpoint_path, expect_kind=KIND_FULL)
    return model, mc


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    cfg.require("model")
    model, mc = _restore_model(cfg, args.checkpoint, args.base)
    ds = load_dataset(args.data)
    _check_data_matches(ds, mc)
    if args.split == "all":
        utts = ds.utterances
    else:
        cfg.require("train")
        train_utts, eval_utts = split_dataset(ds, cfg.values["train"]["eval_fraction"])
        utts = train_utts if args.split == "train" else eval_utts
    rep = evaluate(model, utts)
    print(f"mean_loss {rep.mean_loss!r}")
    print(f"wer {rep.wer!r}")
    return 0


def _parse_n_list(raw: str, num_layers: int) -> list[int]:
    try:
        ns = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"--n must be a comma-separated int list, got {raw!r}") from exc
    if not ns:
        raise ConfigError("--n must name at least one layer count")
    for n in ns:
        if not 1 <= n <= num_layers:
            raise ConfigError(f"--n entry {n} outside [1, {num_layers}]")
    return ns


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    cfg.require("model", "adapter", "train", "transfer")
    mc = cfg.model_config()
    ac = cfg.adapter_config(mc.num_layers)
    tv = cfg.values["train"]
    freeze = cfg.values["transfer"]["freeze_transformer_steps"]
    ns = _parse_n_list(args.n, mc.num_layers)

    ds = load_dataset(args.data)
    _check_data_matches(ds, mc)
    train_utts, eval_utts = split_dataset(ds, tv["eval_fraction"])
    target_utts = eval_utts or train_utts

    if args.base:
        kind, digest = read_header(args.base)
        if kind != KIND_FULL or digest != architecture_digest(mc, None):
            raise ArtifactMismatchError(f"{args.base}: not a full checkpoint of this model")

    adapter_steps = tv["total_steps"]
    finetune_steps = tv["ablate_finetune_steps"] or 2 * adapter_steps
    adapter_peak = tv["peak_lr"]
    finetune_peak = tv["ablate_finetune_peak_lr"] or adapter_peak / 10.0

    # matched budgets: the fine-tune recipe runs longer at a lower peak, the
    # adapter recipe uses the configured bi-stage budget; both are recorded
    recipes = {
        "topn_finetune": (
            Schedule(
                "tri_stage",
                finetune_peak,
                finetune_steps,
                tv["warmup_frac"],
                tv["hold_frac"],
                tv["final_scale"],
            ),
            freeze,
        ),
        "topn_adapter": (
            Schedule("bi_stage", adapter_peak, adapter_steps, tv["warmup_frac"]),
            0,
        ),
    }

    lines = [f"# config_digest: {cfg.digest()}"]
    lines.append("method,n,trainable_params,fraction,steps,peak_lr,wer")
    for n in ns:
        for method in ("topn_finetune", "topn_adapter"):
            schedule, freeze_steps = recipes[method]
            model = build_model(mc, None, tv["seed"])
            if args.base:
                load_checkpoint(model, args.base, expect_kind=KIND_FULL)
            if method == "topn_adapter":
                placement = AdapterConfig(
                    ac.bottleneck, top_n_layers(mc.num_layers, n), ac.nonlinearity
                )
                insert_adapters(model, placement, tv["seed"])
            policy = TransferPolicy(method, n=n, freeze_transformer_steps=freeze_steps)
            tc = TrainConfig(
                policy=policy,
                schedule=schedule,
                batch_size=tv["batch_size"],
                seed=tv["seed"],
                beta1=tv["beta1"],
                beta2=tv["beta2"],
                adam_eps=tv["adam_eps"],
                grad_clip=tv["grad_clip"] if tv["grad_clip"] > 0 else None,
            )
            run_training(model, train_utts, tc)
            rep = evaluate(model, target_utts)
            counts = count_params(model, policy)
            lines.append(
                f"{method},{n},{counts.trainable},{counts.fraction!r},"
                f"{schedule.total_steps},{schedule.peak_lr!r},{rep.wer!r}"
            )
    text = "\n".join(lines) + "\n"
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_params(args) -> int:
    cfg = _load_cfg(args)
    cfg.require("model")
    mc = cfg.model_config()
    ac = cfg.adapter_config(mc.num_layers)

    rows: list[tuple[str, object, object]] = []
    rows.append(("full_finetune", count_params_config(mc, None, TransferPolicy("full_finetune")),
                 (mc, None, TransferPolicy("full_finetune"))))
    if ac is not None:
        rows.append(("adapter", count_params_config(mc, ac, TransferPolicy("adapter")),
                     (mc, ac, TransferPolicy("adapter"))))
    rows.append(("layernorm_only", count_params_config(mc, None, TransferPolicy("layernorm_only")),
                 (mc, None, TransferPolicy("layernorm_only"))))
    configured = None
    if cfg.has("transfer"):
        policy = cfg.transfer_policy()
        if policy.mode == "topn_adapter":
            if ac is None:
                raise ConfigError("transfer.mode topn_adapter needs an [adapter] section")
            top_ac = AdapterConfig(
                ac.bottleneck, top_n_layers(mc.num_layers, policy.n), ac.nonlinearity
            )
            configured = (f"topn_adapter({policy.n})", count_params_config(mc, top_ac, policy),
                          (mc, top_ac, policy))
        elif policy.mode == "topn_finetune":
            configured = (f"topn_finetune({policy.n})", count_params_config(mc, None, policy),
                          (mc, None, policy))
    if configured is not None:
        rows.append(configured)

    print(f"# config_digest: {cfg.digest()}")
    print("mode,total_params,trainable_params,fraction,delta_bytes")
    for label, report, key in rows:
        delta = delta_checkpoint_size_config(*key)
        print(f"{label},{report.total},{report.trainable},{report.fraction!r},{delta}")

    if ac is not None:
        print("# storage projection: tasks,finetune_bytes,adapter_bytes")
        for tasks, ft_bytes, ad_bytes in storage_projection(mc, ac, max_tasks=5):
            print(f"{tasks},{ft_bytes},{ad_bytes}")

    if args.out:
        if not cfg.has("transfer"):
            raise ConfigError("--out needs a [transfer] section to pick the reported policy")
        policy = cfg.transfer_policy()
        report_ac = ac
        if policy.mode == "topn_adapter":
            report_ac = AdapterConfig(
                ac.bottleneck, top_n_layers(mc.num_layers, policy.n), ac.nonlinearity
            )
        report = count_params_config(mc, report_ac, policy)
        Path(args.out).write_text(report.to_csv(), encoding="utf-8")
        print(f"breakdown {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctcadapters",
        description="Adapter-based transfer experiments for a CTC sequence recognizer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a dataset file from [data]")
    p_synth.add_argument("--config", required=True)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train under the configured transfer policy")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--data", required=True)
    p_train.add_argument("--out", required=True, help="checkpoint output path")
    p_train.add_argument("--base", default=None, help="full checkpoint to start from")
    p_train.add_argument("--metrics", default=None, help="metrics CSV path (default: <out>.metrics.csv)")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--base", default=None, help="full checkpoint under a delta")
    p_eval.add_argument("--split", choices=("all", "train", "eval"), default="all")
    p_eval.add_argument("--seed", type=int, default=None)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="top-n sweep for fine-tune and adapter transfer")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--data", required=True)
    p_ablate.add_argument("--n", required=True, help="comma-separated layer counts, e.g. 1,2,4")
    p_ablate.add_argument("--out", required=True, help="result CSV path")
    p_ablate.add_argument("--base", default=None, help="full checkpoint to transfer from")
    p_ablate.add_argument("--seed", type=int, default=None)
    p_ablate.set_defaults(func=cmd_ablate)

    p_params = sub.add_parser("params", help="parameter accounting and storage projection")
    p_params.add_argument("--config", required=True)
    p_params.add_argument("--out", default=None, help="breakdown CSV for the configured policy")
    p_params.add_argument("--seed", type=int, default=None)
    p_params.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ArtifactMismatchError as exc:
        print(f"artifact mismatch: {exc}", file=sys.stderr)
        return 3
    except NumericalAbortError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
