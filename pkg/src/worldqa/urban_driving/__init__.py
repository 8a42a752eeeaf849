"""Lane-based traffic simulation with IDM car following and scripted scenarios."""
from worldqa.urban_driving.idm import IdmParams, InvalidGap, equilibrium_gap, idm_acceleration
from worldqa.urban_driving.scenarios import (
    NOMINAL, OOD, TEMPLATES, ScenarioSpec, UnknownTemplate, spawn_scenario,
)
from worldqa.urban_driving.scene import (
    EGO, DrivingGoal, EgoAction, Intersection, LaneGeometry, Obstacle, Pedestrian, TrafficScene,
    Trigger, VehicleState, check_outcome, export_trace, leader_of, load_trace, step_scene,
)
