"""
Глобальные настройки симулятора доставки и бенчмарка
"""
import math
import os

from dotenv import load_dotenv

load_dotenv()

# Логирование
LOG_LEVEL = os.getenv("OPEN_LOG", os.getenv("LASTMILE_LOG", "INFO"))
LOG_FILE = os.getenv("LASTMILE_LOG_FILE", "")

# База данных результатов
DB_PATH = os.getenv("LASTMILE_DB_PATH", "./bench_results.db")
DATABASE_CONFIG = {
    "episodes_table": "episodes",
    "tasks_table": "tasks"
}

# Проекция и адреса
EARTH_RADIUS = 6371000.0  # средний радиус Земли, м
PROJECTION_CONFIG = {
    "max_distance": 50000.0,  # м от начала координат
    "roundtrip_tolerance": 1e-9  # градусы
}
ADDRESS_LEVELS = ("region", "street", "building", "unit")
SEMANTIC_KEYS = (
    "amenity", "barrier", "building", "entrance", "highway",
    "landuse", "leisure", "natural", "place", "waterway"
)
SPATIAL_INDEX_CONFIG = {
    "cell_size": 25.0  # м
}
MAP_UPDATE_CONFIG = {
    "duplicate_radius": 1.0  # м
}

# Маршрутизация
ROUTING_CONFIG = {
    "snap_radius": 50.0,
    "target_cells": 4
}
PROFILES = {
    "pedestrian": {
        "speeds": {
            "footway": 1.2, "path": 1.2, "pedestrian": 1.2, "living_street": 1.2,
            "residential": 1.0, "service": 1.0, "unclassified": 1.0,
            "tertiary": 1.0, "secondary": 0.9, "primary": 0.9, "track": 0.8
        }
    },
    "vehicle": {
        "speeds": {
            "residential": 8.0, "service": 5.0, "unclassified": 8.0, "living_street": 3.0,
            "tertiary": 11.0, "secondary": 14.0, "primary": 17.0
        }
    }
}

# Планирование задач
TASKPLAN_CONFIG = {
    "group_radius": 30.0,  # м, близкие задачи идут подряд
    "adapter_timeout": 30.0,  # с
    "adapter_retries": 1
}

# Исследование здания
EXPLORE_CONFIG = {
    "inflation_margin": 2.0,  # радиус робота 0.4 + зазор 1.6
    "waypoint_spacing": 3.0,
    "match_confidence": 0.5,
    "miter_limit": 2.0,
    "hull_k": 3
}

# Регистрация и граф поз
REGISTRATION_CONFIG = {
    "max_iterations": 50,
    "tolerance_xy": 1e-6,
    "tolerance_theta": 1e-6,
    "gate_factor": 3.0,
    "gate_min": 1.0,
    "min_points": 10,
    "min_inlier_fraction": 0.5,
    "diverge_patience": 5
}
POSE_GRAPH_CONFIG = {
    "window": 100,
    "lambda_init": 1e-4,
    "lambda_factor": 10.0,
    "lambda_max": 1e10,
    "max_iterations": 100,
    "relative_tolerance": 1e-9,
    "keyframe_interval": 1.0,  # с
    "prior_interval": 10.0,  # с, глобальная локализация
    "odometry_sigma": [0.05, 0.05, 0.01],  # м, м, рад на ключевой кадр
    "prior_sigma": [0.1, 0.1, 0.01],
    "marginal_sigma": [0.5, 0.5, 0.05]
}

# Робот и симуляция
ROBOT_CONFIG = {
    "max_v": 1.5,
    "max_w": 1.5,
    "radius": 0.4,
    "dt": 0.1,
    "cruise_v": 1.0,
    "lookahead": 1.0,
    "goal_tolerance": 0.3
}
COSTMAP_CONFIG = {
    "resolution": 0.25,
    "inflation": 0.6,
    "inflated_cost": 5.0,
    "margin": 10.0  # м вокруг границ карты
}
SENSOR_CONFIG = {
    "scan_range": 20.0,
    "scan_rays": 360,
    "scan_min_range": 0.3,
    "door_range": 8.0,
    "door_fov": math.pi / 2,
    "p_detect": 1.0,
    "door_tolerance": 0.5  # м до стены своего здания
}
NOISE_DEFAULTS = {
    "sigma_v": 0.02,
    "sigma_w": 0.02,
    "sigma_s": 0.03,
    "outlier_rate": 0.0,
    "outlier_sigma": 5.0,
    "label_flip": 0.05
}

# Метрики и эпизоды
METRIC_CONFIG = {
    "decay_rate": 0.9,
    "success_radius": 10.0,
    "normalization": "normalized"
}
EPISODE_CONFIG = {
    "task_timeout": 600.0,  # симулированные секунды
    "subgoal_spacing": 25.0,  # м между подцелями вдоль маршрута
    "max_replans": 5
}

# Генератор миров
WORLD_CONFIG = {
    "origin": (47.0, 8.0),
    "block_size": 50.0,
    "setback": 8.0,
    "building_gap": 8.0,
    "region": "Green Town",
    "known_door_fraction": 0.5,
    "max_attempts": 10
}
WORLD_PRESETS = {
    "small": {"blocks": (2, 2), "buildings_per_block": 2},
    "medium": {"blocks": (4, 4), "buildings_per_block": 2},
    "large": {"blocks": (8, 8), "buildings_per_block": 2}
}
STREET_NAMES = [
    "Oak Street", "Maple Street", "Cedar Street", "Pine Street", "Elm Street",
    "Birch Street", "Willow Street", "Ash Street", "Linden Street", "Poplar Street"
]
