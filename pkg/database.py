"""
Модуль для работы с базой данных SQLite
Хранение результатов эпизодов и задач бенчмарка
"""

import asyncio
import json
import logging
import sqlite3
from typing import Any, Dict, List, Optional

from globals import DATABASE_CONFIG, DB_PATH

logger = logging.getLogger(__name__)


class ResultsDatabase:
    def __init__(self, db_path: Optional[str] = None):
        self.db_path = db_path or DB_PATH
        self.config = DATABASE_CONFIG
        self.connection = None
        self.lock = asyncio.Lock()

    async def initialize(self):
        """Инициализация базы данных"""
        try:
            logger.info("📊 Инициализация базы результатов...")

            self.connection = sqlite3.connect(self.db_path, check_same_thread=False)
            self.connection.row_factory = sqlite3.Row
            await self._create_tables()

            logger.info("✅ База результатов инициализирована")

        except Exception as e:
            logger.error(f"Ошибка инициализации БД: {e}")
            raise

    async def _create_tables(self):
        try:
            cursor = self.connection.cursor()

            cursor.execute(f"""
                CREATE TABLE IF NOT EXISTS {self.config['episodes_table']} (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    scenario TEXT NOT NULL,
                    srtp REAL,
                    sr REAL,
                    spl REAL,
                    lsr REAL,
                    lspl REAL,
                    metrics_data TEXT NOT NULL,
                    created_at DATETIME DEFAULT CURRENT_TIMESTAMP
                )
            """)

            cursor.execute(f"""
                CREATE TABLE IF NOT EXISTS {self.config['tasks_table']} (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    episode_id INTEGER NOT NULL,
                    task INTEGER NOT NULL,
                    planned INTEGER NOT NULL,
                    success INTEGER NOT NULL,
                    shortest REAL,
                    travelled REAL NOT NULL,
                    duration REAL NOT NULL,
                    collisions INTEGER NOT NULL,
                    mode TEXT,
                    reason TEXT,
                    FOREIGN KEY (episode_id) REFERENCES {self.config['episodes_table']} (id)
                )
            """)

            cursor.execute(f"""
                CREATE INDEX IF NOT EXISTS idx_episodes_scenario
                ON {self.config['episodes_table']} (scenario)
            """)

            self.connection.commit()
        except Exception as e:
            logger.error(f"Ошибка создания таблиц: {e}")
            raise

    async def save_episode(self, scenario: str, metrics: Dict[str, Any]) -> int:
        """Сохранение метрик эпизода"""
        try:
            async with self.lock:
                cursor = self.connection.cursor()

                cursor.execute(f"""
                    INSERT INTO {self.config['episodes_table']}
                    (scenario, srtp, sr, spl, lsr, lspl, metrics_data)
                    VALUES (?, ?, ?, ?, ?, ?, ?)
                """, (
                    scenario,
                    metrics.get("SRTP"),
                    metrics.get("SR"),
                    metrics.get("SPL"),
                    metrics.get("LSR"),
                    metrics.get("LSPL"),
                    json.dumps(metrics, sort_keys=True)
                ))

                episode_id = cursor.lastrowid
                self.connection.commit()

                logger.info(f"💾 Эпизод сохранён: {scenario} (id {episode_id})")
                return episode_id

        except Exception as e:
            logger.error(f"Ошибка сохранения эпизода: {e}")
            return 0

    async def save_tasks(self, episode_id: int, rows: List[Dict[str, Any]]):
        try:
            async with self.lock:
                cursor = self.connection.cursor()
                cursor.executemany(f"""
                    INSERT INTO {self.config['tasks_table']}
                    (episode_id, task, planned, success, shortest, travelled, duration, collisions, mode, reason)
                    VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
                """, [
                    (episode_id, r["task"], r["T"], r["S"], r["l"], r["p"], r["duration"],
                     r["collisions"], r["mode"], r["reason"])
                    for r in rows
                ])
                self.connection.commit()

        except Exception as e:
            logger.error(f"Ошибка сохранения задач: {e}")

    async def get_scenario_stats(self, scenario: str) -> Dict[str, Any]:
        """Средние метрики по всем прогонам сценария"""
        try:
            async with self.lock:
                cursor = self.connection.cursor()

                cursor.execute(f"""
                    SELECT
                        COUNT(*) as runs,
                        AVG(srtp) as srtp,
                        AVG(sr) as sr,
                        AVG(spl) as spl,
                        AVG(lsr) as lsr,
                        AVG(lspl) as lspl
                    FROM {self.config['episodes_table']}
                    WHERE scenario = ?
                """, (scenario,))

                row = cursor.fetchone()
                return {
                    "scenario": scenario,
                    "runs": row["runs"] or 0,
                    "SRTP": row["srtp"],
                    "SR": row["sr"],
                    "SPL": row["spl"],
                    "LSR": row["lsr"],
                    "LSPL": row["lspl"]
                }

        except Exception as e:
            logger.error(f"Ошибка получения статистики: {e}")
            return {}

    async def get_episode_tasks(self, episode_id: int) -> List[Dict[str, Any]]:
        try:
            async with self.lock:
                cursor = self.connection.cursor()
                cursor.execute(f"""
                    SELECT * FROM {self.config['tasks_table']}
                    WHERE episode_id = ?
                    ORDER BY task
                """, (episode_id,))
                return [dict(row) for row in cursor.fetchall()]

        except Exception as e:
            logger.error(f"Ошибка получения задач эпизода: {e}")
            return []

    async def close(self):
        """Закрытие соединения с базой данных"""
        try:
            if self.connection:
                self.connection.close()
                self.connection = None
                logger.info("📊 Соединение с БД закрыто")
        except Exception as e:
            logger.error(f"Ошибка закрытия БД: {e}")
