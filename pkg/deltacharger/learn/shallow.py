"""
Shallow baselines: KNN, decision tree, random forest, linear SVM trained
with SGD and cross-validated multinomial logistic regression.

All models share the ``Classifier`` interface and keep their fitted state
as named numpy arrays so they can be written to model files.
"""

import logging
from typing import Dict, Optional

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import minimize

from deltacharger.errors import Degenerate, ShapeMismatch
from deltacharger.learn.layers import log_softmax, softmax

logger = logging.getLogger(__name__)

FORCE_SCALE = 9.0
N_FEATURES = 200


def check_labels(y: np.ndarray, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=int)
    present = np.unique(y)
    if len(present) < 2:
        raise Degenerate(f"need at least 2 classes to fit, got {present.tolist()}")
    if present.min() < 0 or present.max() >= n_classes:
        raise Degenerate(f"labels {present.tolist()} outside 0..{n_classes - 1}")
    return y


class Classifier:
    """Common surface for every model: inputs are raw forces in newtons"""

    kind = "base"

    def __init__(self, n_classes: int, seed: int = 0):
        self.n_classes = n_classes
        self.seed = seed

    def _scale(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != N_FEATURES:
            raise ShapeMismatch(f"expected (n, {N_FEATURES}) features, got {X.shape}")
        return X / FORCE_SCALE

    def fit(self, X, y, X_val=None, y_val=None) -> "Classifier":
        y = check_labels(y, self.n_classes)
        self._fit(self._scale(X), y)
        return self

    def predict_proba(self, X) -> np.ndarray:
        return self._proba(self._scale(X))

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def _fit(self, X, y):
        raise NotImplementedError

    def _proba(self, X):
        raise NotImplementedError

    def spec(self) -> str:
        return self.kind

    def to_params(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def load_params(self, params: Dict[str, np.ndarray]) -> None:
        raise NotImplementedError


class KNNClassifier(Classifier):
    kind = "knn"

    def __init__(self, n_classes: int, seed: int = 0, k: int = 5):
        super().__init__(n_classes, seed)
        self.k = k

    def _fit(self, X, y):
        self.X_train, self.y_train = X, y

    def _proba(self, X):
        k = min(self.k, len(self.X_train))
        proba = np.zeros((len(X), self.n_classes))
        for start in range(0, len(X), 64):
            chunk = X[start:start + 64]
            d2 = ((chunk[:, None, :] - self.X_train[None, :, :]) ** 2).sum(axis=2)
            nearest = np.argsort(d2, axis=1, kind="stable")[:, :k]
            votes = self.y_train[nearest]
            for c in range(self.n_classes):
                proba[start:start + 64, c] = (votes == c).sum(axis=1) / k
        return proba

    def spec(self):
        return f"knn(k={self.k})"

    def to_params(self):
        return {"k": np.array([self.k]), "X": self.X_train, "y": self.y_train}

    def load_params(self, params):
        self.k = int(params["k"][0])
        self.X_train = np.asarray(params["X"], dtype=float)
        self.y_train = np.asarray(params["y"], dtype=int)


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int, features: np.ndarray):
    """Gini-optimal (feature, threshold) over ``features``, None when no feature varies"""
    n = len(y)
    values = X[:, features]
    order = np.argsort(values, axis=0, kind="stable")
    sorted_values = np.take_along_axis(values, order, axis=0)
    onehot = np.eye(n_classes)[y]
    left = np.cumsum(onehot[order], axis=0)[:-1]
    total = onehot.sum(axis=0)
    right = total - left

    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    gini_left = 1.0 - ((left / n_left[..., None]) ** 2).sum(axis=2)
    gini_right = 1.0 - ((right / n_right[..., None]) ** 2).sum(axis=2)
    weighted = (n_left * gini_left + n_right * gini_right) / n

    valid = sorted_values[:-1] < sorted_values[1:]
    if not valid.any():
        return None
    weighted = np.where(valid, weighted, np.inf)
    position, column = np.unravel_index(np.argmin(weighted), weighted.shape)
    lo, hi = sorted_values[position, column], sorted_values[position + 1, column]
    threshold = 0.5 * (lo + hi)
    if threshold >= hi:
        threshold = lo
    return int(features[column]), float(threshold)


class DecisionTreeClassifier(Classifier):
    kind = "dt"

    def __init__(self, n_classes: int, seed: int = 0, max_depth: Optional[int] = None, max_features: Optional[int] = None):
        super().__init__(n_classes, seed)
        self.max_depth = max_depth
        self.max_features = max_features

    def _fit(self, X, y):
        rng = np.random.default_rng(self.seed)
        self.fit_nodes(X, y, rng)

    def fit_nodes(self, X, y, rng: np.random.Generator):
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node(idx):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(np.bincount(y[idx], minlength=self.n_classes))
            return len(feature) - 1

        stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            if len(np.unique(y[idx])) < 2 or (self.max_depth is not None and depth >= self.max_depth):
                continue
            if self.max_features is None:
                candidates = np.arange(X.shape[1])
            else:
                candidates = np.sort(rng.choice(X.shape[1], size=self.max_features, replace=False))
            split = _best_split(X[idx], y[idx], self.n_classes, candidates)
            if split is None:
                continue
            feature[node], threshold[node] = split
            goes_left = X[idx, split[0]] <= split[1]
            left_idx, right_idx = idx[goes_left], idx[~goes_left]
            left[node] = new_node(left_idx)
            right[node] = new_node(right_idx)
            stack.append((right[node], right_idx, depth + 1))
            stack.append((left[node], left_idx, depth + 1))

        self.feature = np.array(feature, dtype=int)
        self.threshold = np.array(threshold, dtype=float)
        self.left = np.array(left, dtype=int)
        self.right = np.array(right, dtype=int)
        self.value = np.array(value, dtype=float)
        return self

    def leaves(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            current = node[active]
            goes_left = X[active, self.feature[current]] <= self.threshold[current]
            node[active] = np.where(goes_left, self.left[current], self.right[current])
            active = self.feature[node] >= 0
        return node

    def _proba(self, X):
        counts = self.value[self.leaves(X)]
        return counts / counts.sum(axis=1, keepdims=True)

    def depth(self) -> int:
        depths = np.zeros(len(self.feature), dtype=int)
        for node in range(len(self.feature)):
            if self.feature[node] >= 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def spec(self):
        return "dt(gini)"

    def to_params(self):
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left,
            "right": self.right,
            "value": self.value,
        }

    def load_params(self, params):
        self.feature = np.asarray(params["feature"], dtype=int)
        self.threshold = np.asarray(params["threshold"], dtype=float)
        self.left = np.asarray(params["left"], dtype=int)
        self.right = np.asarray(params["right"], dtype=int)
        self.value = np.asarray(params["value"], dtype=float)


def _fit_tree(X, y, n_classes, max_features, seed_seq):
    rng = np.random.default_rng(seed_seq)
    sample = rng.integers(0, len(y), size=len(y))
    tree = DecisionTreeClassifier(n_classes, max_features=max_features)
    return tree.fit_nodes(X[sample], y[sample], rng)


class RandomForestClassifier(Classifier):
    kind = "rf"

    def __init__(self, n_classes: int, seed: int = 0, n_trees: int = 100, max_features: Optional[int] = None, n_jobs: int = 1):
        super().__init__(n_classes, seed)
        self.n_trees = n_trees
        self.max_features = max_features or int(round(np.sqrt(N_FEATURES)))
        self.n_jobs = n_jobs

    def _fit(self, X, y):
        streams = np.random.SeedSequence(self.seed).spawn(self.n_trees)
        self.trees = Parallel(n_jobs=self.n_jobs)(
            delayed(_fit_tree)(X, y, self.n_classes, self.max_features, stream) for stream in streams
        )
        logger.debug("fitted %d trees, %d features per split", self.n_trees, self.max_features)

    def tree_votes(self, X) -> np.ndarray:
        """Per-tree class predictions, shape (n_trees, n_samples)"""
        X = self._scale(X)
        return np.stack([np.argmax(tree._proba(X), axis=1) for tree in self.trees])

    def _proba(self, X):
        votes = np.stack([np.argmax(tree._proba(X), axis=1) for tree in self.trees])
        counts = np.stack([(votes == c).sum(axis=0) for c in range(self.n_classes)], axis=1)
        return counts / len(self.trees)

    def spec(self):
        return f"rf(trees={self.n_trees},features={self.max_features})"

    def to_params(self):
        blocks = [tree.to_params() for tree in self.trees]
        sizes = [len(b["feature"]) for b in blocks]
        params = {key: np.concatenate([b[key] for b in blocks]) for key in blocks[0]}
        params["offsets"] = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        params["max_features"] = np.array([self.max_features])
        return params

    def load_params(self, params):
        offsets = np.asarray(params["offsets"], dtype=int)
        self.max_features = int(params["max_features"][0])
        self.trees = []
        for start, stop in zip(offsets[:-1], offsets[1:]):
            tree = DecisionTreeClassifier(self.n_classes)
            tree.load_params({key: params[key][start:stop] for key in ("feature", "threshold", "left", "right", "value")})
            self.trees.append(tree)
        self.n_trees = len(self.trees)


class _Standardized(Classifier):
    """Linear models see standardized features plus a constant bias column"""

    def _standardize(self, X, fit: bool = False) -> np.ndarray:
        if fit:
            self.mean = X.mean(axis=0)
            std = X.std(axis=0)
            self.std = np.where(std > 0, std, 1.0)
        Z = (X - self.mean) / self.std
        return np.hstack([Z, np.ones((len(Z), 1))])


class SvmSgdClassifier(_Standardized):
    """One-vs-rest hinge loss with L2, Pegasos step sizes"""

    kind = "svm"

    def __init__(self, n_classes: int, seed: int = 0, lam: float = 1e-4, epochs: int = 20):
        super().__init__(n_classes, seed)
        self.lam = lam
        self.epochs = epochs

    def _fit(self, X, y):
        rng = np.random.default_rng(self.seed)
        Z = self._standardize(X, fit=True)
        signs = np.where(np.arange(self.n_classes)[None, :] == y[:, None], 1.0, -1.0)
        W = np.zeros((self.n_classes, Z.shape[1]))
        t = 0
        for _ in range(self.epochs):
            for i in rng.permutation(len(Z)):
                t += 1
                eta = 1.0 / (self.lam * t)
                margin = signs[i] * (W @ Z[i])
                W *= 1.0 - eta * self.lam
                hinge = margin < 1.0
                W[hinge] += eta * signs[i, hinge, None] * Z[i]
        self.W = W

    def decision_function(self, X) -> np.ndarray:
        return self._standardize(self._scale(X)) @ self.W.T

    def _proba(self, X):
        return softmax(self._standardize(X) @ self.W.T)

    def spec(self):
        return f"svm(lambda={self.lam:g},epochs={self.epochs})"

    def to_params(self):
        return {"W": self.W, "mean": self.mean, "std": self.std}

    def load_params(self, params):
        self.W = np.asarray(params["W"], dtype=float)
        self.mean = np.asarray(params["mean"], dtype=float)
        self.std = np.asarray(params["std"], dtype=float)


def _stratified_folds(y: np.ndarray, n_folds: int, rng: np.random.Generator) -> np.ndarray:
    folds = np.empty(len(y), dtype=int)
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        folds[idx] = np.arange(len(idx)) % n_folds
    return folds


class LogRegCVClassifier(_Standardized):
    """Multinomial logistic regression, C picked by stratified k-fold accuracy"""

    kind = "logreg"
    GRID = (0.01, 0.1, 1.0, 10.0)

    def __init__(self, n_classes: int, seed: int = 0, n_folds: int = 5, max_iter: int = 200):
        super().__init__(n_classes, seed)
        self.n_folds = n_folds
        self.max_iter = max_iter

    def _solve(self, Z, y, C) -> np.ndarray:
        onehot = np.eye(self.n_classes)[y]
        shape = (Z.shape[1], self.n_classes)

        def objective(w):
            W = w.reshape(shape)
            logp = log_softmax(Z @ W)
            penalty = W[:-1]
            loss = -(onehot * logp).sum() + 0.5 / C * (penalty ** 2).sum()
            grad = Z.T @ (np.exp(logp) - onehot)
            grad[:-1] += penalty / C
            return loss, grad.ravel()

        result = minimize(objective, np.zeros(np.prod(shape)), jac=True, method="L-BFGS-B",
                          options={"maxiter": self.max_iter})
        return result.x.reshape(shape)

    def _fit(self, X, y):
        rng = np.random.default_rng(self.seed)
        folds = _stratified_folds(y, self.n_folds, rng)
        scores = []
        for C in self.GRID:
            fold_scores = []
            for k in range(self.n_folds):
                train, held = folds != k, folds == k
                self._standardize(X[train], fit=True)
                W = self._solve(self._standardize(X[train]), y[train], C)
                predicted = np.argmax(self._standardize(X[held]) @ W, axis=1)
                fold_scores.append(float((predicted == y[held]).mean()))
            scores.append(float(np.mean(fold_scores)))
            logger.debug("logreg C=%g cv accuracy %.4f", C, scores[-1])

        self.C = self.GRID[int(np.argmax(scores))]
        self.cv_scores = scores
        self.W = self._solve(self._standardize(X, fit=True), y, self.C)

    def _proba(self, X):
        return softmax(self._standardize(X) @ self.W)

    def spec(self):
        return f"logreg(C={self.C:g},folds={self.n_folds})"

    def to_params(self):
        return {"W": self.W, "mean": self.mean, "std": self.std, "C": np.array([self.C])}

    def load_params(self, params):
        self.W = np.asarray(params["W"], dtype=float)
        self.mean = np.asarray(params["mean"], dtype=float)
        self.std = np.asarray(params["std"], dtype=float)
        self.C = float(params["C"][0])


SHALLOW_MODELS = {
    "knn": KNNClassifier,
    "dt": DecisionTreeClassifier,
    "rf": RandomForestClassifier,
    "svm": SvmSgdClassifier,
    "logreg": LogRegCVClassifier,
}


def shallow_fit(kind: str, X, y, n_classes: int, seed: int = 0, n_jobs: int = 1) -> Classifier:
    if kind not in SHALLOW_MODELS:
        raise Degenerate(f"unknown shallow model '{kind}'")
    if kind == "rf":
        model = RandomForestClassifier(n_classes, seed=seed, n_jobs=n_jobs)
    else:
        model = SHALLOW_MODELS[kind](n_classes, seed=seed)
    return model.fit(X, y)
