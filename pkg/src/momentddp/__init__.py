"""Moment DDP: dual dynamic programming for polynomial optimal control.

Forward passes propagate truncated moments of the state distribution through
single-stage semidefinite relaxations; backward passes solve sum-of-squares
programs that accumulate polynomial lower bounds (cuts) on each stage's value
function.  The two bound sequences sandwich the optimum and drive an
epsilon-gap termination rule.
"""

from momentddp.poly import Monomial, Polynomial

__all__ = ["Monomial", "Polynomial"]
__version__ = "0.1.0"
