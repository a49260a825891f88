"""Command-line pipeline driver.

One workspace directory (--out) holds all run state as explicit files:
datasets, checkpoints, the gallery, predictions, and reports.  Every
command resolves its configuration from defaults plus an optional
--config JSON document, writes the resolved document back into the
workspace, and embeds its sha256 hash in emitted artifacts.  A
non-blocking advisory lock on the workspace keeps concurrent runs from
interleaving writes.

Exit codes: 0 success, 2 usage or config error, 3 data error,
4 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import fcntl
import json
import pathlib
import sys

import numpy as np

from . import decode, geodesy, rerank, seqmodel, synthworld
from .align import AlignEncoder, train_align
from .config import PREDICT_MODES, SELECTORS, RunConfig
from .errors import (ConfigError, DataFormatError, GeoTokenError,
                     InvalidInputError, NumericalError)
from .gallery import Gallery
from .geocell import (LatLon, TokenSequence, detokenize, tokenize,
                      tokenize_batch)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"
ALIGN_FILE = "align.bin"
ALIGN_CURVE_FILE = "align_curve.csv"
GALLERY_FILE = "gallery.bin"
MODEL_FILE = "model.bin"
MODEL_CURVE_FILE = "train_curve.csv"
REWARD_FILE = "reward.bin"
PREDICTIONS_FILE = "predictions.jsonl"
REPORT_FILE = "report.csv"
SWEEP_FILE = "sweep.csv"
CONFIG_FILE = "run_config.json"
JUDGE_LOG_FILE = "judge_log.jsonl"

_CHUNK = 256        # queries encoded/decoded per batch, bounds memory


@contextlib.contextmanager
def locked_workspace(out_dir):
    """Create the workspace and hold its advisory lock for the command."""
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handle = open(out / ".lock", "w")
    try:
        try:
            fcntl.flock(handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise ConfigError(f"workspace {out} is locked by another run") from None
        yield out
    finally:
        handle.close()


def load_run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig.default()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def write_resolved_config(out: pathlib.Path, cfg: RunConfig) -> str:
    h = cfg.config_hash()
    doc = {"sha256": h, "config": cfg.to_dict()}
    (out / CONFIG_FILE).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return h


def _require(path: pathlib.Path, hint: str) -> pathlib.Path:
    if not path.exists():
        raise DataFormatError(f"{path} is missing; run `geotoken {hint}` first")
    return path


def _load_split(out: pathlib.Path, name: str) -> list:
    return synthworld.load_jsonl(_require(out / name, "gen"))


def _load_encoder(out: pathlib.Path, cfg: RunConfig) -> AlignEncoder:
    return AlignEncoder.load(_require(out / ALIGN_FILE, "train-align"), cfg.align)


def _load_gallery(out: pathlib.Path) -> Gallery:
    return Gallery.load(_require(out / GALLERY_FILE, "build-gallery"))


def _load_model(out: pathlib.Path):
    return seqmodel.load_model(_require(out / MODEL_FILE, "train-model"))


def _derived_seed(seed: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(405,) + key)
    return int(ss.generate_state(1)[0])


def _sample_columns(samples: list):
    feats = np.asarray([s.feat for s in samples], dtype=np.float32)
    lat = np.asarray([s.lat for s in samples])
    lon = np.asarray([s.lon for s in samples])
    ids = np.asarray([s.id for s in samples], dtype=np.uint64)
    return ids, feats, lat, lon


# --- commands ---------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = load_run_config(args)
    with locked_workspace(args.out) as out:
        h = write_resolved_config(out, cfg)
        train, test = synthworld.generate(cfg.world)
        synthworld.save_jsonl(train, out / TRAIN_FILE)
        synthworld.save_jsonl(test, out / TEST_FILE)
    print(f"gen: {len(train)} train / {len(test)} test samples (config {h[:12]})")
    return EXIT_OK


def cmd_train_align(args) -> int:
    cfg = load_run_config(args)
    with locked_workspace(args.out) as out:
        h = write_resolved_config(out, cfg)
        samples = _load_split(out, TRAIN_FILE)
        train_align(samples, cfg.align,
                    checkpoint_path=out / ALIGN_FILE,
                    curve_path=out / ALIGN_CURVE_FILE)
    print(f"train-align: {len(samples)} samples (config {h[:12]})")
    return EXIT_OK


def cmd_build_gallery(args) -> int:
    cfg = load_run_config(args)
    with locked_workspace(args.out) as out:
        h = write_resolved_config(out, cfg)
        samples = _load_split(out, TRAIN_FILE)
        enc = _load_encoder(out, cfg)
        entries = synthworld.to_gallery_entries(samples, enc, levels=cfg.model.L)
        gallery = Gallery.build(entries, levels=cfg.model.L)
        gallery.save(out / GALLERY_FILE)
    print(f"build-gallery: {len(gallery)} entries, dim {gallery.dim} "
          f"(config {h[:12]})")
    return EXIT_OK


def cmd_train_model(args) -> int:
    cfg = load_run_config(args)
    with locked_workspace(args.out) as out:
        h = write_resolved_config(out, cfg)
        samples = _load_split(out, TRAIN_FILE)
        enc = _load_encoder(out, cfg)
        gallery = _load_gallery(out)
        ids, feats, lat, lon = _sample_columns(samples)
        _, _, e_img = enc.project_image_batch(feats)
        if e_img.shape[1] != cfg.model.input_dims:
            raise ConfigError(
                f"model.input_dims {cfg.model.input_dims} != embedding dim "
                f"{e_img.shape[1]} produced by the align config")
        targets = tokenize_batch(lat, lon, cfg.model.L)
        params, curve = seqmodel.train(
            ids, e_img, targets, gallery, cfg.model, cfg.train,
            checkpoint_path=out / MODEL_FILE, curve_path=out / MODEL_CURVE_FILE)
        rerank.train_reward_model(ids, e_img, lat, lon, gallery, params,
                                  cfg.model, cfg.reward,
                                  checkpoint_path=out / REWARD_FILE)
    print(f"train-model: final loss {curve[-1][1]:.4f} over {len(curve)} steps "
          f"(config {h[:12]})")
    return EXIT_OK


def _judge_transport(path) -> rerank.RecordedJudgeTransport:
    """Scripted replies for offline judging: JSONL of strings or objects.

    String lines are replies; {"response": ...} likewise; {"error":
    "timeout"|"connection"} injects a transport failure for that call.
    """
    replies: list = []
    p = pathlib.Path(path)
    if not p.exists():
        raise DataFormatError(f"judge fixture file {p} does not exist")
    for ln, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{p}:{ln}: bad fixture line ({e})") from None
        if isinstance(rec, str):
            replies.append(rec)
        elif isinstance(rec, dict) and "response" in rec:
            replies.append(str(rec["response"]))
        elif isinstance(rec, dict) and rec.get("error") == "timeout":
            replies.append(TimeoutError("scripted timeout"))
        elif isinstance(rec, dict) and rec.get("error") == "connection":
            replies.append(ConnectionError("scripted connection failure"))
        else:
            raise DataFormatError(f"{p}:{ln}: fixture line must be a string, "
                                  "a response object, or an error object")
    return rerank.RecordedJudgeTransport(replies)


def _apply_predict_flags(cfg: RunConfig, args) -> RunConfig:
    updates = {}
    if args.mode is not None:
        updates["mode"] = args.mode
    if args.selector is not None:
        updates["selector"] = args.selector
    if args.k is not None:
        updates["pool_size"] = args.k
    if args.temperature is not None:
        updates["temperature"] = args.temperature
    if args.beam is not None:
        updates["beam_width"] = args.beam
    if args.limit is not None:
        updates["limit"] = args.limit
    if not updates:
        return cfg
    return dataclasses.replace(cfg, predict=dataclasses.replace(cfg.predict,
                                                                **updates))


def cmd_predict(args) -> int:
    cfg = _apply_predict_flags(load_run_config(args), args)
    pc = cfg.predict
    with locked_workspace(args.out) as out:
        h = write_resolved_config(out, cfg)
        samples = _load_split(out, TEST_FILE)
        if pc.limit is not None:
            samples = samples[:pc.limit]
        enc = _load_encoder(out, cfg)
        gallery = _load_gallery(out)
        params, mcfg = _load_model(out)
        ids, feats, lat, lon = _sample_columns(samples)
        _, e_ig, e_img = enc.project_image_batch(feats)

        rm = None
        if pc.mode == "pool" and pc.selector == "reward":
            rm = rerank.load_reward_model(_require(out / REWARD_FILE, "train-model"))
        judge = None
        if pc.mode == "pool" and pc.selector == "judge":
            transport = _judge_transport(args.judge_fixtures) \
                if args.judge_fixtures else None
            judge = rerank.JudgeClient(cfg.judge, transport=transport,
                                       audit_path=out / JUDGE_LOG_FILE)

        qn, nb, nt = seqmodel.neighbor_context(gallery, e_img, m=mcfg.M,
                                               workers=pc.workers)
        n = len(samples)
        rows = []
        for start in range(0, n, _CHUNK):
            stop = min(start + _CHUNK, n)
            mems = seqmodel.encode(
                [seqmodel.EncoderInput(qn[i], nb[i], nt[i])
                 for i in range(start, stop)], params, mcfg)
            if pc.mode == "greedy":
                toks, lps = decode.greedy_batch(mems, params, mcfg)
                for j, i in enumerate(range(start, stop)):
                    ts = TokenSequence.from_array(toks[j].astype(np.uint8))
                    loc = detokenize(ts)
                    rows.append(_prediction_row(ids[i], loc, str(ts),
                                                float(lps[j])))
                continue
            for j, i in enumerate(range(start, stop)):
                if pc.mode == "beam":
                    best = decode.beam_search(mems[j], params, mcfg,
                                              pc.beam_width)[0]
                    rows.append(_prediction_row(ids[i], best.location,
                                                str(best.tokens), best.logprob))
                    continue
                pool = decode.sample_pool(mems[j], params, mcfg,
                                          pc.temperature, pc.pool_size,
                                          seed=_derived_seed(pc.seed, i))
                if pc.selector == "judge":
                    res = judge.select(pool, query_id=int(ids[i]))
                    member = pool[res.selected_index] \
                        if res.selected_index is not None else None
                    rows.append(_prediction_row(
                        ids[i], res.location,
                        str(member.tokens) if member else None,
                        member.logprob if member else None,
                        fallback=res.fallback))
                    continue
                if pc.selector == "logprob":
                    c = rerank.select_logprob(pool)
                elif pc.selector == "reward":
                    c = rerank.select_reward(pool, rm, nt[i])
                elif pc.selector == "similarity":
                    c = rerank.select_similarity(pool, e_ig[i], enc.gps_params)
                else:
                    c = rerank.select_ideal(pool, LatLon(float(lat[i]),
                                                         float(lon[i])))
                rows.append(_prediction_row(ids[i], c.location, str(c.tokens),
                                            c.logprob))

        header = {"kind": "predictions", "config_sha256": h, "mode": pc.mode,
                  "selector": pc.selector if pc.mode == "pool" else None,
                  "n": len(rows)}
        with open(out / PREDICTIONS_FILE, "w") as f:
            f.write(json.dumps(header, separators=(",", ":")) + "\n")
            for r in rows:
                f.write(json.dumps(r, separators=(",", ":")) + "\n")
    print(f"predict: {len(rows)} predictions via {pc.mode}"
          f"{'/' + pc.selector if pc.mode == 'pool' else ''} (config {h[:12]})")
    return EXIT_OK


def _prediction_row(qid, loc: LatLon, tokens, logprob, fallback=None) -> dict:
    row = {"id": int(qid), "lat": loc.lat_deg, "lon": loc.lon_deg,
           "tokens": tokens, "logprob": logprob}
    if fallback is not None:
        row["fallback"] = bool(fallback)
    return row


def read_predictions(path) -> tuple[dict | None, list]:
    """(header or None, rows) from a predictions file; rows keep file order."""
    path = pathlib.Path(path)
    if not path.exists():
        raise DataFormatError(f"{path} is missing; run `geotoken predict` first")
    header = None
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{path}:{ln}: bad JSON ({e})") from None
            if ln == 1 and isinstance(rec, dict) and rec.get("kind") == "predictions":
                header = rec
                continue
            try:
                rows.append({"id": int(rec["id"]), "lat": float(rec["lat"]),
                             "lon": float(rec["lon"])})
            except (KeyError, TypeError, ValueError):
                raise DataFormatError(
                    f"{path}:{ln}: prediction rows need id, lat, lon") from None
    return header, rows


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args)
    with locked_workspace(args.out) as out:
        pred_path = pathlib.Path(args.pred) if args.pred else out / PREDICTIONS_FILE
        truth_path = pathlib.Path(args.truth) if args.truth else out / TEST_FILE
        header, rows = read_predictions(pred_path)
        truths = synthworld.load_jsonl(_require(truth_path, "gen"))
        by_id = {int(s.id): s.location for s in truths}
        preds, refs = [], []
        for r in rows:
            if r["id"] not in by_id:
                raise DataFormatError(
                    f"prediction id {r['id']} has no ground-truth row")
            preds.append(LatLon(r["lat"], r["lon"]))
            refs.append(by_id[r["id"]])
        report = geodesy.evaluate(preds, refs)
        h = header.get("config_sha256") if header else cfg.config_hash()
        text = report.to_csv(config_hash=h)
        (out / REPORT_FILE).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_run_config(args)
    sw = cfg.sweep
    if args.limit is not None:
        sw = dataclasses.replace(sw, limit=args.limit)
    with locked_workspace(args.out) as out:
        h = write_resolved_config(out, cfg)
        samples = _load_split(out, TEST_FILE)
        if sw.limit is not None:
            samples = samples[:sw.limit]
        enc = _load_encoder(out, cfg)
        gallery = _load_gallery(out)
        params, mcfg = _load_model(out)
        _, feats, lat, lon = _sample_columns(samples)
        _, _, e_img = enc.project_image_batch(feats)
        qn, nb, nt = seqmodel.neighbor_context(gallery, e_img, m=mcfg.M,
                                               workers=sw.workers)
        n = len(samples)
        ks = [int(k) for k in sw.ks]
        k_max = max(ks)
        medians = np.zeros((len(ks), len(sw.temperatures)))
        errors = np.zeros((n, len(ks)))
        for ti, temp in enumerate(sw.temperatures):
            for start in range(0, n, _CHUNK):
                stop = min(start + _CHUNK, n)
                mems = seqmodel.encode(
                    [seqmodel.EncoderInput(qn[i], nb[i], nt[i])
                     for i in range(start, stop)], params, mcfg)
                for j, i in enumerate(range(start, stop)):
                    pool = decode.sample_pool(mems[j], params, mcfg,
                                              float(temp), k_max,
                                              seed=_derived_seed(sw.seed, ti, i))
                    clat = np.asarray([c.location.lat_deg for c in pool])
                    clon = np.asarray([c.location.lon_deg for c in pool])
                    err = geodesy.haversine_km_batch(clat, clon, lat[i], lon[i])
                    best = np.minimum.accumulate(err)
                    errors[i] = [best[k - 1] for k in ks]
            medians[:, ti] = np.median(errors, axis=0)
        lines = [f"# config_hash={h}",
                 "k," + ",".join(f"T={t:g}" for t in sw.temperatures)]
        for ki, k in enumerate(ks):
            lines.append(f"{k}," + ",".join(f"{medians[ki, ti]:.6f}"
                                            for ti in range(len(sw.temperatures))))
        text = "\n".join(lines) + "\n"
        (out / SWEEP_FILE).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_tokenize(args) -> int:
    value = args.value.strip()
    if args.reverse:
        loc = detokenize(TokenSequence.from_string(value))
        print(f"{loc.lat_deg:.10f},{loc.lon_deg:.10f}")
        return EXIT_OK
    parts = value.split(",")
    if len(parts) != 2:
        raise InvalidInputError(
            f"expected 'lat,lon', got {args.value!r}")
    try:
        lat, lon = float(parts[0]), float(parts[1])
    except ValueError:
        raise InvalidInputError(
            f"expected decimal coordinates, got {args.value!r}") from None
    print(str(tokenize(LatLon(lat, lon), args.levels)))
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="geotoken",
        description="Hierarchical geocell sequence prediction pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, with_out=True):
        sp.add_argument("--config", metavar="PATH", default=None,
                        help="run config JSON; defaults apply when omitted")
        sp.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override every configured seed")
        if with_out:
            sp.add_argument("--out", metavar="DIR", required=True,
                            help="workspace directory for run state")

    sp = sub.add_parser("gen", help="generate the synthetic dataset")
    add_common(sp)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train-align", help="train the embedding alignment")
    add_common(sp)
    sp.set_defaults(func=cmd_train_align)

    sp = sub.add_parser("build-gallery", help="embed and index the train split")
    add_common(sp)
    sp.set_defaults(func=cmd_build_gallery)

    sp = sub.add_parser("train-model", help="train sequence and reward models")
    add_common(sp)
    sp.set_defaults(func=cmd_train_model)

    sp = sub.add_parser("predict", help="decode test queries to locations")
    add_common(sp)
    sp.add_argument("--mode", choices=PREDICT_MODES, default=None)
    sp.add_argument("--selector", choices=SELECTORS, default=None)
    sp.add_argument("--k", type=int, default=None, help="candidate pool size")
    sp.add_argument("--temperature", type=float, default=None)
    sp.add_argument("--beam", type=int, default=None, help="beam width")
    sp.add_argument("--limit", type=int, default=None,
                    help="only the first N test queries")
    sp.add_argument("--judge-fixtures", metavar="PATH", default=None,
                    help="scripted judge replies instead of live HTTP")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against truth")
    add_common(sp)
    sp.add_argument("--pred", metavar="PATH", default=None)
    sp.add_argument("--truth", metavar="PATH", default=None)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("sweep", help="closest-in-pool grid over k and T")
    add_common(sp)
    sp.add_argument("--limit", type=int, default=None,
                    help="only the first N test queries")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("tokenize", help="coordinate <-> token string")
    sp.add_argument("value", help="'lat,lon' or a token digit string")
    sp.add_argument("--reverse", action="store_true",
                    help="token string to cell-center coordinate")
    sp.add_argument("--levels", type=int, default=21)
    sp.set_defaults(func=cmd_tokenize)

    return p


def _diagnostic(code: int, err: Exception) -> int:
    rec = {"error": err.__class__.__name__, "message": str(err),
           "exit_code": code}
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        return _diagnostic(EXIT_CONFIG, e)
    except NumericalError as e:
        return _diagnostic(EXIT_NUMERIC, e)
    except (DataFormatError, InvalidInputError, FileNotFoundError) as e:
        return _diagnostic(EXIT_DATA, e)
    except GeoTokenError as e:
        return _diagnostic(EXIT_DATA, e)


if __name__ == "__main__":
    sys.exit(main())
