"""Held-out evaluation, the autoregressive feedback protocol and the loss ablation harness."""
from __future__ import annotations

import math
from pathlib import Path

from .data import write_map_png
from .metrics import evaluate_frames, format_table
from .training import TrainConfig, load_checkpoint, train


class EmptyReportError(ValueError):
    pass


ABLATION_ROWS = (
    ("L_CC + L_G_BCE", ("CC", "G_BCE")),
    ("L_KL + L_G_BCE", ("KL", "G_BCE")),
    ("L_KL + L_G_BCE + L_S_MSE", ("KL", "G_BCE", "S_MSE")),
    ("L_CC + L_KL + L_G_BCE", ("CC", "KL", "G_BCE")),
    ("L_CC + L_KL + L_S_MSE + L_G_BCE", ("CC", "KL", "S_MSE", "G_BCE")),
)


def generator_predictor(generator):
    """Batch-of-one, eval-mode prediction function ``(frame, sal_prev) -> 1 x H x W``."""
    def predict(frame, sal_prev):
        return generator(frame, sal_prev, train=False).data
    return predict


def _predictor(model):
    if callable(model) and not hasattr(model, "params"):
        return model
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model).generator
    return generator_predictor(model)


def _dump(dump_dir, video_id, t, pred):
    d = Path(dump_dir) / video_id
    d.mkdir(parents=True, exist_ok=True)
    write_map_png(d / f"{t:06d}.png", pred)


def _report(sequences, preds, meta):
    gts, fixes, ids = [], [], []
    for seq_id, t, _ in preds:
        seq = sequences[seq_id]
        gts.append(seq.saliency[t])
        fixes.append(seq.fixations[t])
        ids.append(f"{seq.id}/{t:06d}")
    if not preds:
        raise EmptyReportError("no frame has a ground-truth map k frames earlier; nothing to evaluate")
    report = evaluate_frames([p for *_, p in preds], gts, fixes, ids)
    report.meta.update(meta)
    return report


def evaluate(model, sequences, k=5, dump_maps=None, return_maps=False):
    """Predict every frame t >= k from (frame_t, gt saliency_{t-k}) and score it.

    ``model`` is a generator, a checkpoint directory or a plain
    ``(frame, sal_prev) -> map`` callable.
    """
    predict = _predictor(model)
    preds = []
    for si, seq in enumerate(sequences):
        for t in range(k, len(seq)):
            pred = predict(seq.frames[t], seq.saliency[t - k])
            preds.append((si, t, pred))
            if dump_maps:
                _dump(dump_maps, seq.id, t, pred)
    report = _report(sequences, preds, {"protocol": "ground truth at t-k", "k": k})
    return (report, [p for *_, p in preds]) if return_maps else report


def feedback_schedule(length, n, k=5):
    """Input source per evaluated frame: ("gt", t - k) or ("pred", t - 1).

    The cycle starts with a ground-truth-fed frame and repeats every ``n`` frames.
    """
    if n < 1:
        raise ValueError(f"feedback interval must be >= 1, got {n}")
    return [(t, ("gt", t - k) if j % n == 0 else ("pred", t - 1)) for j, t in enumerate(range(k, length))]


def evaluate_feedback(model, sequences, n, k=5, trace=None):
    """Autoregressive evaluation: own prediction at t-1 as input, ground truth at t-k every ``n`` frames.

    If ``trace`` is a list, one ``(video_id, t, source, index)`` tuple is
    appended per prediction.
    """
    schedules = [feedback_schedule(len(seq), n, k) for seq in sequences]
    predict = _predictor(model)
    preds = []
    gt_reads = 0
    for si, (seq, schedule) in enumerate(zip(sequences, schedules)):
        own = {}
        for t, (source, index) in schedule:
            if source == "gt":
                inp = seq.saliency[index]
                gt_reads += 1
            else:
                inp = own[index]
            if trace is not None:
                trace.append((seq.id, t, source, index))
            own[t] = pred = predict(seq.frames[t], inp)
            preds.append((si, t, pred))
    meta = {"protocol": "feedback", "k": k, "n": n, "gt_reads": gt_reads}
    if n == 1:
        meta = {"protocol": "ground truth at t-k", "k": k}
    return _report(sequences, preds, meta)


def expected_gt_reads(sequences, n, k=5):
    return sum(math.ceil(max(len(s) - k, 0) / n) for s in sequences)


def feedback_sweep(model, sequences, ns=range(1, 11), k=5):
    """Reports for each interval in ``ns`` plus a table laid out by interval."""
    predict = _predictor(model)
    reports = {n: evaluate_feedback(predict, sequences, n, k) for n in ns}
    table = format_table([(n, r.mean) for n, r in reports.items()], first="# of Frames")
    return reports, table


def run_ablation(base: TrainConfig, train_sequences, test_sequences, out_dir=None, rows=ABLATION_ROWS):
    """Train one model per loss combination and compare them on the test set.

    Returns (results, table) where results maps each row label to its
    :class:`MetricsReport`.
    """
    results = {}
    for label, terms in rows:
        cfg = TrainConfig.from_dict({**base.to_dict(), "loss.terms": list(terms)})
        run_dir = Path(out_dir) / _slug(label) if out_dir else None
        state = train(cfg, train_sequences, out_dir=run_dir)
        results[label] = evaluate(state.generator, test_sequences, k=cfg.k)
    table = format_table([(label, r.mean) for label, r in results.items()], first="Loss")
    return results, table


def _slug(label):
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()

