"""Command-line front end: ``matchcard {synth,train,enroll,verify,rekey,replay,roc,latency}``.

Exit codes for card commands: 0 on SW 9000, 1 on SW 6985, 2 on any other
status word or on a usage/input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .apdu import (
    SUPPORTED_LENGTHS,
    ApduResponse,
    StatusWord,
    TemplatePayload,
    TraceLog,
    enroll_command,
    rekey_command,
    verify_command,
)
from .card import Card, CardConfig
from .datasets import SyntheticDatasetSpec, generate_synthetic, load_embeddings, save_embeddings
from .evaluation import evaluate, offline_roc, find_eer, eer_value, report_json
from .pcaitq import DEFAULT_ITQ_ITERATIONS, PcaItqModel, RotationRegistry, fit_pca_itq, majority_fuse
from .transport import default_profiles, load_profiles, sweep

log = logging.getLogger("matchcard")

ENV_OUTPUT_DIR = "MATCHCARD_OUTPUT_DIR"
EXIT_ACCEPT, EXIT_REJECT, EXIT_OTHER = 0, 1, 2


class CliError(Exception):
    pass


def _output_dir(args) -> Path:
    root = Path(args.out_dir or os.environ.get(ENV_OUTPUT_DIR) or ".")
    root.mkdir(parents=True, exist_ok=True)
    return root


def _sw_exit(sw: int) -> int:
    if sw == StatusWord.OK:
        return EXIT_ACCEPT
    if sw == StatusWord.CONDITIONS_NOT_SATISFIED:
        return EXIT_REJECT
    return EXIT_OTHER


def _sw_name(sw: int) -> str:
    try:
        return f"SW {sw:04X} ({StatusWord(sw).text})"
    except ValueError:
        return f"SW {sw:04X}"


def _write_or_print(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _dataset_from_args(args):
    if args.embeddings:
        path = Path(args.embeddings)
        if not path.exists():
            raise CliError(f"embeddings file not found: {path}")
        return load_embeddings(path)
    return generate_synthetic(_synth_spec(args))


def _synth_spec(args) -> SyntheticDatasetSpec:
    return SyntheticDatasetSpec(
        n_identities=args.identities,
        images_per_identity=args.per_identity,
        embedding_dim=args.dim,
        sigma_between=args.sigma_between,
        sigma_within=args.sigma_within,
        seed=args.seed,
        n_images=args.images,
    )


def _load_model(path) -> PcaItqModel:
    path = Path(path)
    if not path.exists():
        raise CliError(f"model file not found: {path}")
    return PcaItqModel.load(path)


def _load_card(args, length_bits: int, create: bool) -> Card:
    path = Path(args.card)
    if path.exists():
        return Card.from_bytes(path.read_bytes())
    if not create:
        raise CliError(f"card image not found: {path}")
    if args.tau is None:
        raise CliError("--tau is required to personalize a new card")
    return Card(CardConfig(
        {length_bits: args.tau},
        eeprom_quota_bytes=args.quota,
        require_issuer_auth_for_enroll=args.require_auth,
    ))


def _transmit(card: Card, raw: bytes, trace: TraceLog) -> int:
    resp = card.transmit(raw)
    trace.record(raw, resp)
    return ApduResponse.from_bytes(resp).sw


def _finish_card_command(args, card: Card, trace: TraceLog, sw: int) -> int:
    card.issuer_authenticated = False  # authentication lasts one invocation
    Path(args.card).write_bytes(card.to_bytes())
    if args.trace:
        with open(args.trace, "a") as fh:
            fh.write(trace.dump())
    print(_sw_name(sw))
    return _sw_exit(sw)


def _payload(args, model: PcaItqModel, template) -> TemplatePayload:
    if args.long_form:
        return TemplatePayload(model.rotation_id, template, args.salt_id, args.template_id)
    return TemplatePayload(model.rotation_id, template)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    dataset = generate_synthetic(_synth_spec(args))
    out = Path(args.output) if args.output else _output_dir(args) / "embeddings.emb"
    save_embeddings(dataset, out)
    print(f"wrote {len(dataset)} embeddings ({len(dataset.identities())} identities) to {out}")
    return 0


def cmd_train(args) -> int:
    dataset = _dataset_from_args(args)
    registry = RotationRegistry(args.registry or _output_dir(args) / "registry")
    rotation_id = registry.allocate_id()
    model = fit_pca_itq(dataset.embeddings, args.bits, seed=args.seed,
                        rotation_id=rotation_id, iterations=args.iterations)
    model.check_orthogonality()
    path = registry.register(model, seed=args.seed)
    if args.output:
        model.save(args.output)
        path = Path(args.output)
    print(f"rotation_id={rotation_id} model={path}")
    return 0


def cmd_enroll(args) -> int:
    model = _load_model(args.model)
    dataset = load_embeddings(args.embeddings)
    card = _load_card(args, model.length_bits, create=True)
    if args.issuer_auth:
        card.authenticate_issuer()
    _check_indices(args.images, dataset)
    reference = majority_fuse([model.encode(dataset.embeddings[i]) for i in args.images])
    trace = TraceLog()
    sw = _transmit(card, enroll_command(_payload(args, model, reference)).to_bytes(), trace)
    return _finish_card_command(args, card, trace, sw)


def cmd_verify(args) -> int:
    model = _load_model(args.model)
    dataset = load_embeddings(args.embeddings)
    card = _load_card(args, model.length_bits, create=True)
    _check_indices([args.image], dataset)
    probe = model.encode(dataset.embeddings[args.image])
    trace = TraceLog()
    sw = _transmit(card, verify_command(_payload(args, model, probe)).to_bytes(), trace)
    return _finish_card_command(args, card, trace, sw)


def cmd_rekey(args) -> int:
    card = _load_card(args, 0, create=False)
    if args.issuer_auth:
        card.authenticate_issuer()
    trace = TraceLog()
    sw = _transmit(card, rekey_command(args.rotation_id).to_bytes(), trace)
    return _finish_card_command(args, card, trace, sw)


def _check_indices(indices, dataset) -> None:
    for i in indices:
        if not 0 <= i < len(dataset):
            raise CliError(f"image index {i} outside [0, {len(dataset)})")


def cmd_replay(args) -> int:
    dataset = _dataset_from_args(args)
    model = _load_model(args.model)
    result = evaluate(dataset, model, seed=args.seed, tau=args.tau,
                      far_target=args.far_target, jobs=args.jobs,
                      with_trace=bool(args.trace))
    report = result.report()
    out = Path(args.output) if args.output else _output_dir(args) / f"replay_{model.length_bits}.json"
    out.write_text(report_json(report))
    if args.trace:
        Path(args.trace).write_text(result.replay.trace.dump())
    c = result.replay.confusion
    print(f"tau={result.tau} streamed TPR={c.tpr:.4f} FAR={c.far:.4f} "
          f"(tp={c.tp} fn={c.fn} fp={c.fp} tn={c.tn}) report={out}")
    return 0


def cmd_roc(args) -> int:
    dataset = _dataset_from_args(args)
    model = _load_model(args.model)
    curve = offline_roc(dataset, model)
    _write_or_print(curve.to_csv(), args.output)
    point = find_eer(curve)
    print(f"EER={eer_value(point):.4f} at tau={point.tau}", file=sys.stderr)
    return 0


def cmd_latency(args) -> int:
    if args.profiles:
        if not Path(args.profiles).exists():
            raise CliError(f"profile document not found: {args.profiles}")
        profiles = load_profiles(args.profiles)
    else:
        profiles = default_profiles()
    report = sweep(profiles)
    text = report.to_json() if args.format == "json" else report.to_csv()
    _write_or_print(text, args.output)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_synth_args(p, seed_required=True) -> None:
    p.add_argument("--seed", type=int, required=seed_required)
    g = p.add_argument_group("synthetic dataset (used when --embeddings is absent)")
    g.add_argument("--identities", type=int, default=55)
    g.add_argument("--images", type=int, default=412, help="total images spread over identities")
    g.add_argument("--per-identity", type=int, default=7)
    g.add_argument("--dim", type=int, default=128)
    g.add_argument("--sigma-between", type=float, default=1.0)
    g.add_argument("--sigma-within", type=float, default=0.95)


def _add_card_args(p) -> None:
    p.add_argument("--model", required=True)
    p.add_argument("--card", required=True, help="card image file (created on first enroll)")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--tau", type=int, help="threshold provisioned when the card is created")
    p.add_argument("--quota", type=int, default=512, help="EEPROM quota in bytes for a new card")
    p.add_argument("--require-auth", action="store_true", help="new card requires issuer auth to enroll")
    p.add_argument("--issuer-auth", action="store_true", help="authenticate the issuer for this session")
    p.add_argument("--long-form", action="store_true", help="use the 8-byte payload header")
    p.add_argument("--salt-id", type=int, default=0)
    p.add_argument("--template-id", type=int, default=0)
    p.add_argument("--trace", help="append a hex APDU trace to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="matchcard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--out-dir", help=f"output directory (env {ENV_OUTPUT_DIR})")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic embedding set")
    _add_synth_args(p)
    p.add_argument("--output", help="EMB1 file, or .csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a PCA-ITQ model and register its RotationID")
    p.add_argument("--embeddings")
    p.add_argument("--bits", type=int, choices=SUPPORTED_LENGTHS, default=64)
    p.add_argument("--iterations", type=int, default=DEFAULT_ITQ_ITERATIONS)
    p.add_argument("--registry", help="registry directory (default OUT_DIR/registry)")
    p.add_argument("--output", help="also write the model file here")
    _add_synth_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enroll", help="fuse images and send ENROLL_TEMPLATE")
    _add_card_args(p)
    p.add_argument("--images", type=int, nargs="+", required=True, help="embedding indices to fuse")
    p.set_defaults(func=cmd_enroll)

    p = sub.add_parser("verify", help="send VERIFY_BINARY for one image")
    _add_card_args(p)
    p.add_argument("--image", type=int, required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("rekey", help="send REKEY_ROTATION")
    p.add_argument("--card", required=True)
    p.add_argument("--rotation-id", type=int, required=True)
    p.add_argument("--issuer-auth", action="store_true")
    p.add_argument("--trace")
    p.set_defaults(func=cmd_rekey)

    p = sub.add_parser("replay", help="offline ROC plus streamed enrol->verify replay")
    p.add_argument("--embeddings")
    p.add_argument("--model", required=True)
    sel = p.add_mutually_exclusive_group()
    sel.add_argument("--tau", type=int)
    sel.add_argument("--far-target", type=float, default=1e-2)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output", help="JSON report path")
    p.add_argument("--trace", help="write the hex APDU trace here")
    _add_synth_args(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("roc", help="emit the offline ROC table as CSV")
    p.add_argument("--embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--output")
    _add_synth_args(p, seed_required=False)
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("latency", help="latency sweep over link profiles")
    p.add_argument("--profiles", help="JSON profile document (default: built-in sweep)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--output")
    p.set_defaults(func=cmd_latency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    if getattr(args, "command", None) == "roc" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"matchcard: error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
