#!/usr/bin/env python3
"""
Invariance Monitor
Re-verifies a recorded trace from its raw states: h_tot is recomputed with an
independent log-sum-exp, every cascade level psi_j is re-evaluated, and the
run is summarised into a report with alerts for any violation.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from barrier import ComposedBarrier, PsiCascade
from margins import build_margin_report

logger = logging.getLogger(__name__)

VIOLATION_TOL = 0.0
AGREEMENT_TOL = 1e-9
BEST_EFFORT_STATUSES = ("Fallback", "NumericalFailure")


def oracle_h(barrier: ComposedBarrier, x_bar: np.ndarray) -> float:
    """(1/rho) logsumexp(rho h_k) computed by scipy"""
    values = barrier.atom_values(x_bar)
    return float(logsumexp(barrier.rho * values) / barrier.rho)


@dataclass
class InvarianceReport:
    max_h_tot: float
    first_violation: Optional[float]
    fallback_count: int
    fallback_per_agent: Dict[str, int]
    psi_max: List[float]
    psi_first_violation: List[Optional[float]]
    margin_residuals: Dict[str, float]
    logged_h_residual: float
    min_slack: Optional[float]
    status_counts: Dict[str, int]
    step_count: int
    alerts: List[str] = field(default_factory=list)

    @property
    def safe(self) -> bool:
        return self.first_violation is None and all(t is None for t in self.psi_first_violation)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["safe"] = self.safe
        return data


def _first_time(times: np.ndarray, values: np.ndarray, tol: float) -> Optional[float]:
    bad = np.flatnonzero(values > tol)
    return float(times[bad[0]]) if bad.size else None


def _check_alerts(report: InvarianceReport) -> List[str]:
    alerts = []
    if report.first_violation is not None:
        alerts.append(f"❌ h_tot > 0 first at t={report.first_violation:.4f} (max {report.max_h_tot:.4g})")
    for j, t in enumerate(report.psi_first_violation):
        if t is not None and j > 0:
            alerts.append(f"❌ psi_{j} > 0 first at t={t:.4f} (max {report.psi_max[j]:.4g})")
    if report.logged_h_residual > AGREEMENT_TOL:
        alerts.append(f"⚠️ logged h_tot disagrees with recomputation by {report.logged_h_residual:.3e}")
    if report.fallback_count:
        alerts.append(f"⚠️ {report.fallback_count} best-effort events")
    return alerts


def verify_invariance(trace, barrier: ComposedBarrier, cascade: Optional[PsiCascade] = None,
                      tol: float = VIOLATION_TOL) -> InvarianceReport:
    """Recompute h_tot and psi_j at every recorded integration step"""
    steps = trace.steps()
    times = steps["t"].to_numpy(dtype=float)
    states = steps[trace.x_columns].to_numpy(dtype=float)
    h = np.array([oracle_h(barrier, x) for x in states]) if len(states) else np.zeros(0)

    if cascade is not None and cascade.order >= 2:
        psi = np.array([cascade.values(x) for x in states]).reshape(len(states), cascade.order)
    else:
        psi = h.reshape(-1, 1)
    psi_max = [float(np.max(psi[:, j])) if len(psi) else -np.inf for j in range(psi.shape[1])]
    psi_first = [_first_time(times, psi[:, j], tol) for j in range(psi.shape[1])]

    logged = steps["h_tot"].to_numpy(dtype=float)
    residual = float(np.max(np.abs(logged - h))) if len(h) else 0.0

    samples = trace.samples()
    status_counts = {str(k): int(v) for k, v in samples["status"].value_counts().sort_index().items()}
    best_effort = samples[samples["status"].isin(BEST_EFFORT_STATUSES)]
    per_agent = {str(k): int(v) for k, v in best_effort["agent"].value_counts().sort_index().items()}

    events = trace.event_frame()
    finite = events["slack"].replace([np.inf, -np.inf], np.nan).dropna() if len(events) else pd.Series(dtype=float)
    max_h = float(np.max(h)) if len(h) else -np.inf

    report = InvarianceReport(
        max_h_tot=max_h,
        first_violation=_first_time(times, h, tol),
        fallback_count=int(len(best_effort)),
        fallback_per_agent=per_agent,
        psi_max=psi_max,
        psi_first_violation=psi_first,
        margin_residuals={"safe_set": max_h, "cascade": max(psi_max) if psi_max else -np.inf},
        logged_h_residual=residual,
        min_slack=float(finite.min()) if len(finite) else None,
        status_counts=status_counts,
        step_count=int(len(times)),
    )
    report.alerts = _check_alerts(report)
    for alert in report.alerts:
        logger.warning(alert)
    if report.safe:
        logger.info(f"✅ invariant held over {report.step_count} steps (max h_tot {max_h:.4g})")
    return report


def build_run_report(trace, scenario, invariance: InvarianceReport) -> Dict:
    """report.json contents for one run"""
    data = invariance.to_dict()
    data.update({
        "scenario": trace.scenario_name,
        "seed": trace.seed,
        "run_status": trace.status,
        "error": trace.error,
        "wall_time_s": round(trace.wall_time, 3),
        "margins": build_margin_report(scenario, scenario.effective_margin()).to_dict(),
    })
    return data


def save_report(report: Dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, default=float))
    logger.info(f"📊 report saved to {path}")
    return path
