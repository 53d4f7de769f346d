"""Synthetic traffic scenes: maps, rule-based agents and dataset files."""
from mdg.synthworld.agents import generate_scenarios, simulate_rule_agents
from mdg.synthworld.dataset import load_dataset, save_dataset
from mdg.synthworld.maps import KINDS, generate_map
from mdg.synthworld.scenario import PEDESTRIAN, VEHICLE, Scenario, scenarios_equal

__all__ = [
    "KINDS", "PEDESTRIAN", "VEHICLE", "Scenario", "generate_map", "generate_scenarios",
    "load_dataset", "save_dataset", "scenarios_equal", "simulate_rule_agents",
]
