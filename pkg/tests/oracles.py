"""Dense Gaussian moment-generating-function oracles, independent of the structured code."""
import numpy as np


def joint_moments(layout, theta, beta, d, i, j):
    """Mean and covariance of (y_s, y_di, y_dj) for out-of-sample units i, j of area position d."""
    su2, se2 = theta
    n = layout.n
    area = layout.areas[d]
    X = layout.X
    mu = np.concatenate([X @ beta, [area.X_r[i] @ beta, area.X_r[j] @ beta]])
    Z = np.zeros((n, layout.D))
    Z[np.arange(n), layout.area_index] = 1
    S = np.zeros((n + 2, n + 2))
    S[:n, :n] = su2 * Z @ Z.T + se2 * np.eye(n)
    S[:n, n] = S[:n, n + 1] = su2 * Z[:, d]
    S[n, :n] = S[n + 1, :n] = su2 * Z[:, d]
    S[n, n] = S[n + 1, n + 1] = su2 + se2
    S[n, n + 1] = S[n + 1, n] = su2 + (se2 if i == j else 0.0)
    return mu, S


def mgf(a, c, mu, S):
    """E exp(a'z + c) for z ~ N(mu, S)."""
    return np.exp(a @ mu + 0.5 * a @ S @ a + c)


def mcpe_linear(layout, theta, beta, d, i, j, coef_i, const_i, coef_j, const_j):
    """E[(exp(b_i'y_s + c_i) - w_i)(exp(b_j'y_s + c_j) - w_j)] by the MGF."""
    mu, S = joint_moments(layout, theta, beta, d, i, j)
    n = layout.n
    ei = np.zeros(n + 2)
    ei[n] = 1
    ej = np.zeros(n + 2)
    ej[n + 1] = 1
    pi = np.concatenate([coef_i, [0, 0]])
    pj = np.concatenate([coef_j, [0, 0]])
    return (mgf(pi + pj, const_i + const_j, mu, S) - mgf(pi + ej, const_i, mu, S)
            - mgf(ei + pj, const_j, mu, S) + mgf(ei + ej, 0.0, mu, S))


def bp_coefficients(layout, theta, beta, d, i):
    """log w~_di = b'y_s + c for the best predictor."""
    su2, se2 = theta
    nd = layout.n_d[d]
    g = nd * su2 / (se2 + nd * su2)
    alpha = 0.5 * (su2 * (1 - g) + se2)
    b = (layout.area_index == d) * g / nd
    x = layout.areas[d].X_r[i]
    return b.astype(float), float(x @ beta - g * layout.xbar[d] @ beta + alpha)


def eb1_coefficients(layout, theta, d, i):
    """log w^_di = b'y_s + alpha for the first-stage EB predictor (dense GLS)."""
    su2, se2 = theta
    Z = np.zeros((layout.n, layout.D))
    Z[np.arange(layout.n), layout.area_index] = 1
    V = su2 * Z @ Z.T + se2 * np.eye(layout.n)
    Vi = np.linalg.inv(V)
    X = layout.X
    Q = np.linalg.inv(X.T @ Vi @ X)
    B = Q @ X.T @ Vi  # beta~ = B y
    nd = layout.n_d[d]
    g = nd * su2 / (se2 + nd * su2)
    alpha = 0.5 * (su2 * (1 - g) + se2)
    x = layout.areas[d].X_r[i]
    b = (x - g * layout.xbar[d]) @ B + (layout.area_index == d) * g / nd
    return b, float(alpha)
