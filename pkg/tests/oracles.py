"""Brute-force reference computations shared by the engine and acceptance tests.

Nothing here calls into the Laplace engine; likelihoods come from scipy.stats
and latent integrals are done on explicit tensor grids.
"""
import itertools
import math

import numpy as np
from scipy import optimize, stats
from scipy.special import logsumexp


def loglik_matrix(family, y, eta, hyper):
    """Log-likelihood summed over data, for a batch of predictor vectors (rows of eta)."""
    if family == "bernoulli":
        ll = y * eta - np.logaddexp(0.0, eta)
    elif family == "gamma":
        k = hyper["shape"]
        ll = stats.gamma.logpdf(y, a=k, scale=np.exp(eta) / k)
    elif family == "gp":
        xi, q = hyper["xi"], hyper.get("q", 0.5)
        sigma = np.exp(eta) * xi / ((1 - q) ** (-xi) - 1)
        ll = stats.genpareto.logpdf(y, c=xi, scale=sigma)
    elif family == "gaussian":
        ll = stats.norm.logpdf(y, loc=eta, scale=1 / math.sqrt(hyper["precision"]))
    else:
        raise ValueError(family)
    return ll.sum(axis=-1)


def log_joint(family, y, design, offset, prec, hyper, x):
    """log pi(y | x) + log N(x; 0, prec^-1) for rows of x."""
    x = np.atleast_2d(x)
    eta = x @ design.T + offset
    sign, logdet = np.linalg.slogdet(prec)
    quad = np.einsum("ij,jk,ik->i", x, prec, x)
    d = prec.shape[0]
    return loglik_matrix(family, y, eta, hyper) - 0.5 * quad + 0.5 * logdet - 0.5 * d * math.log(2 * math.pi)


def latent_integral(family, y, design, offset, prec, hyper, n_nodes=41, width=8.0):
    """log of the integral of exp(log_joint) over x, plus posterior mean and variance of x.

    Uses a tensor grid on the axes of a finite-difference Hessian at the mode
    found by BFGS.
    """
    d = prec.shape[0]

    def neg(x):
        return -float(log_joint(family, y, design, offset, prec, hyper, x)[0])

    res = optimize.minimize(neg, np.zeros(d), method="BFGS", options={"gtol": 1e-10})
    mode = res.x
    h = 1e-4
    hess = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            ei, ej = np.eye(d)[i] * h, np.eye(d)[j] * h
            hess[i, j] = (neg(mode + ei + ej) - neg(mode + ei - ej) - neg(mode - ei + ej) + neg(mode - ei - ej)) / (4 * h * h)
    vals, vecs = np.linalg.eigh(0.5 * (hess + hess.T))
    scales = 1 / np.sqrt(vals)
    nodes = np.linspace(-width, width, n_nodes)
    step = nodes[1] - nodes[0]
    grid = np.array(list(itertools.product(nodes, repeat=d)))
    x = mode + (grid * scales) @ vecs.T
    lj = log_joint(family, y, design, offset, prec, hyper, x)
    log_vol = d * math.log(step) + np.log(scales).sum()
    log_int = logsumexp(lj) + log_vol
    w = np.exp(lj - logsumexp(lj))
    mean = w @ x
    var = w @ (x * x) - mean * mean
    return log_int, mean, var


def nested_quadrature(family, y, design, offset, precision_fn, hyper_fixed, hyper_names,
                      log_prior_fn, thetas, transforms=None, **kw):
    """Exact-up-to-quadrature hyper weights and latent means over given theta points."""
    transforms = transforms or ["log"] * len(hyper_names)
    log_post = []
    means = []
    for theta in thetas:
        hyper = dict(hyper_fixed)
        for name, t, tr in zip(hyper_names, theta, transforms):
            hyper[name] = math.exp(t) if tr == "log" else t
        log_int, mean, _ = latent_integral(family, y, design, offset, precision_fn(hyper), hyper, **kw)
        log_post.append(log_int + log_prior_fn(theta))
        means.append(mean)
    log_post = np.array(log_post)
    w = np.exp(log_post - log_post.max())
    w /= w.sum()
    return w, np.array(means), log_post
