"""Shared test oracles, independent of the library's model code."""

import numpy as np

from discourse_rater.data import Dataset
from discourse_rater.metrics import qwk
from discourse_rater.objective import COMPONENTS, rating_to_index, round_to_rating


def segment_mean_features(dataset: Dataset) -> dict[str, np.ndarray]:
    """Mean-pooled embedding per segment, all modalities concatenated."""
    out = {}
    for seg_id, feats in dataset.features.items():
        parts = [feats.modality(m).mean(axis=0) for m in ("text", "audio", "video")
                 if feats.modality(m).shape[0] > 0]
        out[seg_id] = np.concatenate(parts).astype(np.float64)
    return out


def ridge_fit_predict(x_train, y_train, x_test, alpha=1.0):
    """Dual-form ridge regression (cheap when samples << features)."""
    x_train = np.asarray(x_train)
    mean = x_train.mean(axis=0)
    xc = x_train - mean
    gram = xc @ xc.T + alpha * np.eye(xc.shape[0])
    dual = np.linalg.solve(gram, np.asarray(y_train) - np.mean(y_train))
    return (np.asarray(x_test) - mean) @ xc.T @ dual + np.mean(y_train)


def linear_readout_qwk(dataset: Dataset, component: str,
                       train_fraction: float = 0.6, alpha: float = 1.0) -> float:
    """QWK of a teacher-split ridge readout on mean embeddings.

    This bounds what a trained model should reach on synthetic data: if a
    linear probe recovers the labels, the fusion model has no excuse.
    """
    features = segment_mean_features(dataset)
    teachers = dataset.manifest.teacher_ids()
    n_train = max(1, int(round(train_fraction * len(teachers))))
    train_teachers = set(teachers[:n_train])

    x_train, y_train, x_test, y_test = [], [], [], []
    for seg in dataset.manifest.segments:
        row = features[seg.segment_id]
        label = seg.labels[component]
        if seg.teacher_id in train_teachers:
            x_train.append(row)
            y_train.append(label)
        else:
            x_test.append(row)
            y_test.append(label)
    preds = ridge_fit_predict(x_train, y_train, x_test, alpha=alpha)
    pred_idx = [rating_to_index(round_to_rating(p)) for p in preds]
    true_idx = [rating_to_index(t) for t in y_test]
    return qwk(true_idx, pred_idx, 7)


def mean_readout_qwk(dataset: Dataset) -> float:
    return float(np.mean([linear_readout_qwk(dataset, c) for c in COMPONENTS]))


def make_segment(rng, seg_id="s1", teacher="t1", lesson="l1",
                 text_len=3, chunk_len=4, scale=1.0):
    """Random full-width segment features for model-level tests."""
    from discourse_rater.data import AUDIO_DIM, TEXT_DIM, VIDEO_DIM, SegmentFeatures

    return SegmentFeatures(
        segment_id=seg_id, teacher_id=teacher, lesson_id=lesson,
        text=(scale * rng.standard_normal((text_len, TEXT_DIM))).astype(np.float32),
        audio=(scale * rng.standard_normal((chunk_len, AUDIO_DIM))).astype(np.float32),
        video=(scale * rng.standard_normal((chunk_len, VIDEO_DIM))).astype(np.float32),
    )
