"""Shared test fixtures: violator expressions and a synthetic stress table."""

from __future__ import annotations

import numpy as np

from priorsr.datagen import Dataset, VariableInfo, _stride_split, system_spec
from priorsr.expr import evaluate, parse

OSC1 = "0.8*sin(x) - 0.5*v^3 - 0.2*x^3 - 0.5*x*v - x*cos(x)"
OSC2 = "0.3*sin(t) - 0.5*v^3 - x*v - 5*x*exp(0.5*x)"
CRK = "-0.1899*A^2 + 0.4598*A^2/(0.7498*A^4 + 1)"
A_EQ = "1.1733649765416334"

# yield-stress model with indicator switches; T enters as T/300
_SY = "max(0.833684*(1 - (0.415737*(T/300)^2 + 0.387977*(T/300)^3 + 0.101623*eps*(T/300))), 0.255751)"
_EY = f"({_SY})/36.468489"
STRESS_REF = (
    f"step({_EY} - eps)*(36.468489*eps) + (1 - step({_EY} - eps))"
    f"*(({_SY})*(1 + 0.397738*(eps - {_EY})) - 0.443807*(eps - {_EY})^2)"
)


def ecoli_truth() -> str:
    from priorsr.datagen import ecoli_truth as gt

    return gt()


# (expression, check expected to fail)
VIOLATORS = {
    "ecoli": [
        ("0.8*B*S", "multivariate"),
        (f"{{gt}} + 0.01", "causality"),
        ("{gt} + 0.05*B", "viability"),
        ("0.001*B*S*T*pH", "unimodal"),
        ("0.8*B*S/(0.5 + S)*exp(-(T - 37)^2/20)*exp(-(pH - 7)^2)", "temperature_asymmetry"),
        ("0.8*B*S/(0.5 + S)*tanh(0.5*(T - 30))*exp(-abs(pH - 7))", "unimodal"),
    ],
    "crk": [
        ("0.3", "dynamics_form"),
        ("-0.2*A^2 + 0.4598*A^2/(0.7498*A^4 + 1)", "equilibrium"),
        (f"0.5*(A - {A_EQ})^2", "stability"),
        (f"{CRK} - 0.01", "nonnegative_at_zero"),
        (f"0.3*({A_EQ} - A)", "nonlinearity"),
        ("0.1*A^2 - 0.05*A^4", "equilibrium"),
    ],
    "osc1": [
        (f"{OSC1} + 0.1*sin(t)", "autonomous"),
        ("0.8*sin(x) - 0.5*v^3 + x", "restoring"),
        ("-x + 0.5*v^3", "damping"),
        ("-x - 0.5*v", "nonlinearity"),
        ("-x + 2*x^3 - 0.1*v", "bounded_trajectory"),
        ("-0.5*v^3 - 0.5*x*v", "restoring"),
    ],
    "osc2": [
        ("-0.5*v^3 - x*v - 5*x*exp(0.5*x)", "non_autonomous"),
        ("0.3*sin(t) - 0.5*v^3 - x*v - 5*x", "asymmetric_restoring"),
        ("0.3*sin(t) + 0.5*v^3 - x*v - 5*x*exp(0.5*x)", "damping"),
        ("0.3*t - 0.5*v^3 - x*v - 5*x*exp(0.5*x)", "bounded_driving"),
        ("0.3*t - 0.5*v - 5*x", "nonlinearity"),
        ("0.3*sin(t) + x + v", "bounded_trajectory"),
    ],
    "stress_csv": [
        ("36*eps", "thermo_mechanical"),
        (f"{STRESS_REF} + 0.2", "small_strain"),
        ("10*eps*(1 - 20*eps)*(1 - T/600)", "hardening"),
        ("10*eps*(1 + T/300)", "thermal_softening"),
        ("eps*exp(T/5)", "bounded"),
    ],
}


def violators(system: str) -> list[tuple[str, str]]:
    gt = ecoli_truth() if system == "ecoli" else ""
    return [(e.replace("{gt}", gt), c) for e, c in VIOLATORS[system]]


def ground_truth_text(system: str) -> str:
    if system == "stress_csv":
        return STRESS_REF
    return {"ecoli": ecoli_truth(), "crk": CRK, "osc1": OSC1, "osc2": OSC2}[system]


def stress_dataset() -> Dataset:
    """Noiseless synthetic tensile table generated from ``STRESS_REF``."""
    eps = np.linspace(0.0, 0.2, 41)
    temps = np.array([20.0, 100.0, 150.0, 200.0, 250.0, 300.0])
    E, T = np.meshgrid(eps, temps, indexing="ij")
    E, T = E.ravel(), T.ravel()
    sigma = evaluate(parse(STRESS_REF), {"eps": E, "T": T})
    split = _stride_split(T != 200.0, 5)
    spec = system_spec("stress_csv")
    return Dataset("stress_csv", spec.variables, "sigma", np.column_stack([E, T]), sigma, split,
                   {"system": "stress_csv", "source": "synthetic"})


__all__ = ["VIOLATORS", "violators", "ground_truth_text", "stress_dataset", "STRESS_REF", "VariableInfo"]
