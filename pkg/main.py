#!/usr/bin/env python3
"""
lastmile: симулятор и бенчмарк навигации для доставки последней мили
Командная строка: validate-osm, route, plan, simulate, bench, gen-world, export
"""

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from bench import (
    BenchError, SchemaError, build_report, load_scenario, run_ablation, run_benchmark_async,
    run_episode, write_outputs
)
from database import ResultsDatabase
from explore import ExploreError
from geoloc import LocalizationError
from geojson_export import map_collection, route_collection, write_geojson
from globals import DB_PATH, LOG_LEVEL, PROFILES
from osm_core import GeoPoint, OsmDocument, OsmError, building_parts, find_buildings, parse_osm, serialize_osm
from routing import RoutingEngine, RoutingError
from simworld import SimulationError
from taskplan import TaskPlanError, plan_tasks
from utils import setup_logging
from worldgen import GenWorldSpec, WorldGenError, gen_world

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_TASK_FAILURES, EXIT_ERROR = 0, 1, 2
HARD_ERRORS = (
    OsmError, RoutingError, TaskPlanError, ExploreError, LocalizationError, SimulationError,
    BenchError, WorldGenError, FileNotFoundError, ValueError
)


def _geo(value: str) -> GeoPoint:
    try:
        lat, lon = (float(v) for v in value.split(","))
        return GeoPoint(lat, lon)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"ожидается LAT,LON: {value} ({e})")


def _read_map(path) -> OsmDocument:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Файл карты не найден: {path}")
    return parse_osm(path.read_bytes())


# --- подкоманды ---

def cmd_validate_osm(args) -> int:
    document = _read_map(args.osm)
    broken = []
    for element_id in find_buildings(document):
        try:
            building_parts(document, element_id)
        except OsmError as e:
            broken.append(f"{element_id}: {e}")
    summary = document.summary()
    print(f"{args.osm}: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
    if broken:
        for line in broken:
            print(f"  invalid building {line}")
        return EXIT_ERROR
    print("OK")
    return EXIT_OK


def cmd_route(args) -> int:
    document = _read_map(args.osm)
    engine = RoutingEngine(document, args.profile)
    route = engine.route(args.src, args.dst)
    path = write_geojson(route_collection(route, args.profile), Path(args.out_dir) / "route.geojson")
    print(f"route: {len(route.vertices)} vertices, length {route.length:.1f} m, cost {route.cost:.1f} s -> {path}")
    return EXIT_OK


def cmd_plan(args) -> int:
    document = _read_map(args.osm)
    plan = plan_tasks(args.instruction, document, start=args.start)
    rows = []
    for item in plan.tasks:
        target = item.target
        rows.append({
            "index": item.index,
            "address": item.task.address.to_dict(),
            "package": item.task.package,
            "planned": item.planned,
            "mode": item.mode.value if item.mode else None,
            "resolved_level": item.resolution.resolved_level if item.resolution else None,
            "target": [target.lon, target.lat] if target else None,
            "reason": item.reason
        })
        state = item.mode.value if item.planned else f"FAILED ({item.reason})"
        print(f"  {item.index + 1}. {item.task.address.label()} {state}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps({"srtp": plan.srtp, "tasks": rows}, indent=2, sort_keys=True),
                                   encoding="utf-8")
    print(f"SRTP {plan.srtp:.3f}")
    return EXIT_OK if all(plan.flags) else EXIT_TASK_FAILURES


def _scenarios(args):
    if not args.config:
        raise BenchError("Нужен хотя бы один --config со сценарием")
    return [load_scenario(path, args.seed) for path in args.config]


def _print_metrics(report) -> None:
    for block in report["scenarios"]:
        metrics = ", ".join(f"{k} {v:.3f}" for k, v in block["metrics"].items() if v is not None)
        print(f"{block['name']}: {metrics}")
    aggregate = ", ".join(f"{k} {v:.3f}" for k, v in report["aggregate"].items() if v is not None)
    print(f"aggregate: {aggregate}")
    print(f"hash {report['hash']}")


def cmd_simulate(args) -> int:
    scenario = _scenarios(args)[0]
    episode = run_episode(scenario)
    report = build_report([episode])
    out = Path(args.out_dir)
    write_outputs(report, [episode], out)
    if episode.document is not None and episode.document.revision > 0:
        stem = Path(scenario.model.osm).stem
        revision = out / f"{stem}.r{episode.document.revision}.osm"
        revision.write_bytes(serialize_osm(episode.document))
        print(f"map revision {episode.document.revision} -> {revision}")
    for task in episode.tasks:
        print(f"  task {task.task} {task.label}: T={task.T} S={task.S} p={task.p:.1f} m"
              + (f" ({task.reason})" if task.reason else ""))
    _print_metrics(report)
    return EXIT_TASK_FAILURES if episode.has_failures else EXIT_OK


async def _bench(args, scenarios):
    database = None
    if args.db:
        database = ResultsDatabase(args.db)
        await database.initialize()
    try:
        return await run_benchmark_async(scenarios, args.out_dir, database)
    finally:
        if database:
            await database.close()


def cmd_bench(args) -> int:
    scenarios = _scenarios(args)
    report = asyncio.run(_bench(args, scenarios))
    _print_metrics(report)
    if args.ablation:
        ablation = {}
        for scenario in scenarios:
            ablation[scenario.name] = [
                {"label": p.label, "spl_without": p.spl_without, "spl_with": p.spl_with, "delta": p.delta}
                for p in run_ablation(scenario)
            ]
        path = Path(args.out_dir) / "ablation.json"
        path.write_text(json.dumps(ablation, indent=2, sort_keys=True), encoding="utf-8")
        print(f"ablation -> {path}")
    if report["errors"]:
        for error in report["errors"]:
            print(f"{error['scenario']}: ERROR {error['error']}", file=sys.stderr)
        return EXIT_ERROR
    failures = any(t["S"] == 0 for block in report["scenarios"] for t in block["tasks"])
    return EXIT_TASK_FAILURES if failures else EXIT_OK


def cmd_gen_world(args) -> int:
    seed = 1 if args.seed is None else args.seed
    if args.blocks:
        bx, by = (int(v) for v in args.blocks.lower().split("x"))
        spec = GenWorldSpec(blocks=(bx, by), buildings_per_block=args.buildings_per_block, seed=seed)
    else:
        spec = GenWorldSpec.preset(args.preset, seed)
    world = gen_world(spec)
    paths = world.write(args.out_dir, args.stem)
    print(f"world {spec.blocks[0]}x{spec.blocks[1]} seed {seed}: {len(world.doors)} buildings")
    for kind, path in paths.items():
        print(f"  {kind}: {path}")
    return EXIT_OK


def cmd_export(args) -> int:
    document = _read_map(args.osm)
    stem = Path(args.osm).stem
    if args.geojson:
        path = write_geojson(map_collection(document), Path(args.out_dir) / f"{stem}.geojson")
        print(f"geojson -> {path}")
    else:
        path = Path(args.out_dir) / f"{stem}.normalized.osm"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(serialize_osm(document))
        print(f"osm -> {path}")
    return EXIT_OK


# --- разбор аргументов ---

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", default=[], help="JSON сценария (можно несколько)")
    common.add_argument("--seed", type=int, default=None, help="переопределяет зерно сценария")
    common.add_argument("--out-dir", default="out", help="каталог для выходных файлов")
    common.add_argument("--log-level", default=None, help=f"уровень логов (по умолчанию {LOG_LEVEL})")

    parser = argparse.ArgumentParser(prog="lastmile", description="Навигация доставки последней мили по OSM")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("validate-osm", parents=[common], help="проверка OSM-файла")
    p.add_argument("osm")
    p.set_defaults(handler=cmd_validate_osm)

    p = commands.add_parser("route", parents=[common], help="маршрут между двумя точками")
    p.add_argument("--osm", required=True)
    p.add_argument("--from", dest="src", type=_geo, required=True)
    p.add_argument("--to", dest="dst", type=_geo, required=True)
    p.add_argument("--profile", choices=sorted(PROFILES), default="pedestrian")
    p.set_defaults(handler=cmd_route)

    p = commands.add_parser("plan", parents=[common], help="план задач по инструкции")
    p.add_argument("--osm", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--start", type=_geo, default=None)
    p.set_defaults(handler=cmd_plan)

    p = commands.add_parser("simulate", parents=[common], help="один эпизод сценария")
    p.set_defaults(handler=cmd_simulate)

    p = commands.add_parser("bench", parents=[common], help="бенчмарк набора сценариев")
    p.add_argument("--ablation", action="store_true", help="абляция обновления карты")
    p.add_argument("--db", nargs="?", const=DB_PATH, default=None, help="сохранить результаты в sqlite")
    p.set_defaults(handler=cmd_bench)

    p = commands.add_parser("gen-world", parents=[common], help="генерация тестового мира")
    p.add_argument("--preset", choices=["small", "medium", "large"], default="small")
    p.add_argument("--blocks", default=None, help="например 2x2")
    p.add_argument("--buildings-per-block", type=int, default=2)
    p.add_argument("--stem", default="world")
    p.set_defaults(handler=cmd_gen_world)

    p = commands.add_parser("export", parents=[common], help="экспорт карты")
    p.add_argument("--osm", required=True)
    p.add_argument("--geojson", action=argparse.BooleanOptionalAction, default=True,
                   help="GeoJSON карты; --no-geojson пишет нормализованный OSM XML")
    p.set_defaults(handler=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except SchemaError as e:
        for pointer in e.pointers:
            print(f"schema error {pointer}", file=sys.stderr)
        return EXIT_ERROR
    except HARD_ERRORS as e:
        logger.error(f"Ошибка команды {args.command}: {e}")
        print(f"{e.__class__.__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
