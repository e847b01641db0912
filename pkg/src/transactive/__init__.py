"""Peer-to-peer energy trading among households, coordinated by a consensus ADMM
contract running on a simulated permissioned chain."""

from .chain import ChainRun, ConsensusStall, SettlementDefaultError, run_drill, run_with_chain
from .coordinator import NonConvergenceError, TradingContract, step_penalty
from .energy import ExogenousSeries, HouseholdParams, ParameterError, Schedule, hvac_step, operating_cost
from .ledger import Block, Genesis, LedgerState, Transaction
from .local import InfeasibleHouseholdError, SolverFailure, solve_emp, solve_llp1, solve_llp2
from .qp import QpProblem, solve_log_quadratic, solve_qp
from .scenario import Scenario, SynthTemplate, load_scenario, save_scenario, synth_generate
from .trading import TradingOutcome, run_trading_day

__all__ = [
    "Block", "ChainRun", "ConsensusStall", "ExogenousSeries", "Genesis", "HouseholdParams",
    "InfeasibleHouseholdError", "LedgerState", "NonConvergenceError", "ParameterError", "QpProblem", "Scenario",
    "Schedule", "SettlementDefaultError", "SolverFailure", "SynthTemplate", "TradingContract", "TradingOutcome",
    "Transaction", "hvac_step", "load_scenario", "operating_cost", "run_drill", "run_trading_day",
    "run_with_chain", "save_scenario", "solve_emp", "solve_llp1", "solve_llp2", "solve_log_quadratic",
    "solve_qp", "step_penalty", "synth_generate",
]
