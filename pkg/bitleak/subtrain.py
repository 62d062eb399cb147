"""Substitute training under leaked-weight constraints, PGD and metrics

All computations run in float64 on the CPU so that results are
reproducible given the seed.
"""
import collections

import numpy as np
from sklearn.datasets import make_blobs
from sklearn.metrics import accuracy_score
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import minmax_scale
import torch
import torch.nn.functional as F

from .bitprofile import WeightSetClass
from .victim import QuantizedLayer, VictimModel


DTYPE = torch.float64


class ShapeError(ValueError):
    """Raised when data does not match the network dimensions"""
    pass


class TinyNet(torch.nn.Module):
    def __init__(self, dims, seed=0):
        """Fully connected ReLU network

        Weights are stored in (in_features x out_features)
        orientation and the layers compute ``x @ W + b``; the last
        layer has no activation (logits).

        Parameters
        ----------
        dims: list of int
            Input dimension followed by the output dimension of
            every layer
        seed: int
            Seed for the uniform initialization in
            [-1/sqrt(fan_in), 1/sqrt(fan_in)]
        """
        super(TinyNet, self).__init__()
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValueError("Invalid network dimensions: {}".format(dims))
        gen = torch.Generator().manual_seed(int(seed))
        weights = []
        biases = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = 1 / np.sqrt(fan_in)
            ww = (torch.rand(fan_in, fan_out, generator=gen, dtype=DTYPE)
                  * 2 - 1) * bound
            bb = (torch.rand(fan_out, generator=gen, dtype=DTYPE)
                  * 2 - 1) * bound
            weights.append(torch.nn.Parameter(ww))
            biases.append(torch.nn.Parameter(bb))
        self.weights = torch.nn.ParameterList(weights)
        self.biases = torch.nn.ParameterList(biases)

    @property
    def dims(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def layer_shapes(self):
        return [tuple(w.shape) for w in self.weights]

    def forward(self, x):
        n_layers = len(self.weights)
        for ii in range(n_layers):
            x = x @ self.weights[ii] + self.biases[ii]
            if ii < n_layers - 1:
                x = torch.relu(x)
        return x

    def predict(self, x):
        """Predicted labels for float inputs (np.ndarray)"""
        with torch.no_grad():
            logits = self(torch.as_tensor(x, dtype=DTYPE))
        return logits.argmax(dim=1).numpy()

    def set_parameters(self, weights=None, biases=None):
        with torch.no_grad():
            for param, value in zip(self.weights, weights or []):
                param.copy_(torch.as_tensor(np.asarray(value), dtype=DTYPE))
            for param, value in zip(self.biases, biases or []):
                param.copy_(torch.as_tensor(np.asarray(value), dtype=DTYPE))

    def weight_arrays(self):
        return [w.detach().numpy().copy() for w in self.weights]

    def bias_arrays(self):
        return [b.detach().numpy().copy() for b in self.biases]

    @classmethod
    def from_victim(cls, victim):
        """Float network with the dequantized weights of a victim model"""
        net = cls(victim.dims)
        net.set_parameters([ly.dequantize() for ly in victim.layers],
                           victim.biases)
        return net


def to_victim(net, seed=None, chunk_rows=512, chunk_cols=8,
              page_size_bytes=4096):
    """Quantize a trained network into a :class:`VictimModel`"""
    layers = [QuantizedLayer.from_float(w) for w in net.weight_arrays()]
    return VictimModel(layers, biases=net.bias_arrays(), seed=seed,
                       chunk_rows=chunk_rows, chunk_cols=chunk_cols,
                       page_size_bytes=page_size_bytes)


#: synthetic classification task
Task = collections.namedtuple("Task", ["x_train", "y_train",
                                       "x_test", "y_test"])


def make_task(n_features, n_classes, n_train, n_test, blobs_per_class=4,
              cluster_std=6.0, seed=0):
    """Seeded Gaussian-blob classification task with features in [0, 1]

    Every class is a union of `blobs_per_class` blobs.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("Train and test splits must not be empty!")
    x, centers = make_blobs(n_samples=n_train + n_test,
                            n_features=n_features,
                            centers=n_classes * blobs_per_class,
                            cluster_std=cluster_std,
                            random_state=seed)
    y = centers % n_classes
    x = minmax_scale(x)
    x_train, x_test, y_train, y_test = train_test_split(
        x, y, train_size=n_train, test_size=n_test, random_state=seed,
        stratify=y)
    return Task(x_train, y_train, x_test, y_test)


def subset(x, y, fraction, seed=0):
    """Seeded random subset of a data set (at least one sample)"""
    if not 0 < fraction <= 1:
        raise ValueError("`fraction` must be in (0, 1], got {}!".format(
            fraction))
    n = max(1, int(round(fraction * len(x))))
    idx = np.sort(np.random.default_rng(seed).permutation(len(x))[:n])
    return x[idx], y[idx]


class RangeTensors(object):
    def __init__(self, w_min, w_max, set_class):
        """Projected weight ranges of every layer (dequantized)

        Parameters
        ----------
        w_min, w_max: list of 2d array-like
            Range limits of every layer
        set_class: list of 2d array-like of int
            :class:`bitleak.bitprofile.WeightSetClass` values
        """
        self.w_min = [torch.as_tensor(np.asarray(w), dtype=DTYPE)
                      for w in w_min]
        self.w_max = [torch.as_tensor(np.asarray(w), dtype=DTYPE)
                      for w in w_max]
        self.w_mean = [(a + b) / 2 for a, b in zip(self.w_min, self.w_max)]
        self.set_class = [torch.as_tensor(np.asarray(c, dtype=np.int64))
                          for c in set_class]
        for a, b in zip(self.w_min, self.w_max):
            if bool(torch.any(a > b)):
                raise ValueError("`w_min` exceeds `w_max`!")

    @property
    def layer_shapes(self):
        return [tuple(c.shape) for c in self.set_class]

    def mask(self, layer, kind):
        return self.set_class[layer] == int(kind)

    def count(self, kind):
        return sum(int(self.mask(ii, kind).sum())
                   for ii in range(len(self.set_class)))

    @classmethod
    def from_profile(cls, profile):
        """Ranges of a :class:`bitleak.bitprofile.BitProfile`"""
        arrays = [profile.layer(ii) for ii in range(len(profile.scales))]
        return cls([a["w min"] for a in arrays],
                   [a["w max"] for a in arrays],
                   [a["set class"] for a in arrays])

    @classmethod
    def unleaked(cls, layer_shapes):
        """Ranges without any leaked information"""
        zeros = [np.zeros(sh) for sh in layer_shapes]
        return cls(zeros, zeros,
                   [np.full(sh, int(WeightSetClass.NONE))
                    for sh in layer_shapes])


def _check_data(model, x, y):
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ShapeError("Input of shape {} does not match the input "
                         "dimension {}!".format(tuple(x.shape),
                                                model.dims[0]))
    if y.shape != (x.shape[0],):
        raise ShapeError("Labels of shape {} do not match {} samples!"
                         .format(tuple(y.shape), x.shape[0]))


def _check_ranges(model, ranges):
    if ranges.layer_shapes != model.layer_shapes:
        raise ShapeError("Range shapes {} do not match the layers {}!"
                         .format(ranges.layer_shapes, model.layer_shapes))


def penalty(model, ranges):
    """Squared deviation of the partially leaked weights from their
    projected means"""
    total = torch.zeros((), dtype=DTYPE)
    for ii, ww in enumerate(model.weights):
        partial = ranges.mask(ii, WeightSetClass.PARTIAL)
        if bool(partial.any()):
            total = total + ((ww - ranges.w_mean[ii])[partial] ** 2).sum()
    return total


def objective(model, x, y, ranges, lam):
    value = F.cross_entropy(model(x), y)
    if lam and ranges.count(WeightSetClass.PARTIAL):
        value = value + lam * penalty(model, ranges)
    return value


def _freeze_full(model, ranges):
    for ii, ww in enumerate(model.weights):
        if ww.grad is not None:
            ww.grad[ranges.mask(ii, WeightSetClass.FULL)] = 0


def loss(model, x, y, ranges, lam):
    """Mean-clustering loss and its gradients

    The loss is the cross-entropy plus `lam` times the squared
    deviation of every partially leaked weight from its projected
    mean. Gradients of fully leaked weights are zero.

    Returns
    -------
    value: float
    grads: list of torch.Tensor
        Gradients in ``model.parameters()`` order
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=torch.long)
    _check_data(model, x, y)
    _check_ranges(model, ranges)
    model.zero_grad()
    value = objective(model, x, y, ranges, lam)
    value.backward()
    _freeze_full(model, ranges)
    return float(value), [p.grad.detach().clone()
                          for p in model.parameters()]


class TrainConfig(object):
    def __init__(self, lam=0.01, lr=0.05, epochs=120, finetune_epochs=40,
                 batch_size=32, momentum=0.9, seed=0):
        """Training hyper-parameters

        The last `finetune_epochs` epochs run without penalty and
        without clipping at a tenth of the learning rate.
        """
        if lam < 0:
            raise ValueError("`lam` must be non-negative, got {}!".format(
                lam))
        if not lr > 0:
            raise ValueError("`lr` must be positive, got {}!".format(lr))
        if epochs < 0 or not 0 <= finetune_epochs <= epochs:
            raise ValueError("Need 0 <= finetune_epochs <= epochs, got "
                             "{} and {}!".format(finetune_epochs, epochs))
        if batch_size < 1:
            raise ValueError("`batch_size` must be >= 1, got {}!".format(
                batch_size))
        self.lam = float(lam)
        self.lr = float(lr)
        self.epochs = int(epochs)
        self.finetune_epochs = int(finetune_epochs)
        self.batch_size = int(batch_size)
        self.momentum = float(momentum)
        self.seed = seed


def _clip_partial(model, ranges):
    with torch.no_grad():
        for ii, ww in enumerate(model.weights):
            partial = ranges.mask(ii, WeightSetClass.PARTIAL)
            clipped = torch.minimum(torch.maximum(ww, ranges.w_min[ii]),
                                    ranges.w_max[ii])
            ww.copy_(torch.where(partial, clipped, ww))


def train_substitute(dims, ranges, x, y, config, biases=None):
    """Train a substitute network constrained by leaked weight ranges

    Fully leaked weights start at their exact value and stay frozen,
    partially leaked weights start at their projected mean and are
    clipped into their range after every epoch (except during
    finetuning), all others start random.

    Parameters
    ----------
    dims: list of int
        Network dimensions (identical to the victim)
    ranges: RangeTensors
    x, y: np.ndarray
        Training data (the attacker's subset)
    config: TrainConfig
    biases: list of np.ndarray or None
        Initial biases (trained further)

    Returns
    -------
    net: TinyNet
    """
    if len(x) == 0:
        raise ValueError("No training data given!")
    x = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    net = TinyNet(dims, seed=config.seed)
    _check_data(net, x, y)
    _check_ranges(net, ranges)
    frozen = []
    with torch.no_grad():
        for ii, ww in enumerate(net.weights):
            leaked = ~ranges.mask(ii, WeightSetClass.NONE)
            ww.copy_(torch.where(leaked, ranges.w_mean[ii], ww))
            frozen.append(ranges.mask(ii, WeightSetClass.FULL))
    if biases is not None:
        net.set_parameters(biases=biases)
    full_values = [ww.detach().clone() for ww in net.weights]
    optimizer = torch.optim.SGD(net.parameters(), lr=config.lr,
                                momentum=config.momentum)
    rng = np.random.default_rng(config.seed)
    constrained = config.epochs - config.finetune_epochs
    lam = config.lam
    n = x.shape[0]
    for epoch in range(config.epochs):
        if epoch == constrained:
            lam = 0
            for group in optimizer.param_groups:
                group["lr"] = config.lr * 0.1
        order = torch.as_tensor(rng.permutation(n))
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            value = objective(net, x[idx], y[idx], ranges, lam)
            value.backward()
            _freeze_full(net, ranges)
            optimizer.step()
            with torch.no_grad():
                for ww, fz, fv in zip(net.weights, frozen, full_values):
                    ww.copy_(torch.where(fz, fv, ww))
        if epoch < constrained:
            _clip_partial(net, ranges)
    return net


class PgdConfig(object):
    def __init__(self, epsilon=0.031, steps=7, step_size=None):
        """L-infinity PGD parameters

        The step size defaults to 2 eps / steps, at most eps.
        """
        if epsilon < 0:
            raise ValueError("`epsilon` must be non-negative!")
        if steps < 0:
            raise ValueError("`steps` must be non-negative!")
        if step_size is None:
            step_size = min(2 * epsilon / steps, epsilon) if steps else 0.0
        if step_size < 0 or step_size > epsilon:
            raise ValueError("`step_size` must be in [0, epsilon], got {}!"
                             .format(step_size))
        self.epsilon = float(epsilon)
        self.steps = int(steps)
        self.step_size = float(step_size)


def pgd_attack(model, x, y, pgd_config):
    """Projected gradient descent in the L-infinity ball

    Starts at `x` (no random start); every step ascends the
    cross-entropy along the gradient sign and projects into the
    epsilon ball and into [0, 1].

    Returns
    -------
    x_adv: np.ndarray
    """
    x0 = torch.as_tensor(np.asarray(x), dtype=DTYPE)
    y = torch.as_tensor(np.asarray(y), dtype=torch.long)
    eps = pgd_config.epsilon
    adv = x0.clone()
    for _ in range(pgd_config.steps):
        adv.requires_grad_(True)
        value = F.cross_entropy(model(adv), y)
        grad, = torch.autograd.grad(value, adv)
        with torch.no_grad():
            adv = adv + pgd_config.step_size * grad.sign()
            adv = torch.minimum(torch.maximum(adv, x0 - eps), x0 + eps)
            adv = adv.clamp(0, 1)
    return adv.detach().numpy()


#: evaluation metrics in percent
Metrics = collections.namedtuple("Metrics", ["accuracy", "fidelity",
                                             "acc_under_attack"])


def evaluate(victim, substitute, x, y, pgd_config):
    """Accuracy, fidelity and transfer attack accuracy

    Parameters
    ----------
    victim, substitute: TinyNet
    x, y: np.ndarray
        Test data
    pgd_config: PgdConfig

    Returns
    -------
    metrics: Metrics
        Substitute accuracy, agreement of the predicted labels, and
        victim accuracy on PGD inputs crafted on the substitute
    """
    if victim.dims[0] != substitute.dims[0] or \
            victim.dims[-1] != substitute.dims[-1]:
        raise ShapeError("Victim and substitute dimensions differ!")
    sub_pred = substitute.predict(x)
    vic_pred = victim.predict(x)
    x_adv = pgd_attack(substitute, x, y, pgd_config)
    adv_pred = victim.predict(x_adv)
    return Metrics(100 * accuracy_score(y, sub_pred),
                   100 * accuracy_score(vic_pred, sub_pred),
                   100 * accuracy_score(y, adv_pred))
