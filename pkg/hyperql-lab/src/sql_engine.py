import os
import sqlite3
from datetime import datetime

from .utils import output_root

DB_NAME = "metadata.db"


class SQLMetadataLogger:
    """Registers experiment runs and their headline numbers in a SQLite metadata DB."""

    def __init__(self, db_path=None):
        self.db_path = db_path or os.path.join(output_root(), "governance", DB_NAME)
        os.makedirs(os.path.dirname(os.path.abspath(self.db_path)), exist_ok=True)
        self._ensure_db()

    def _connect(self):
        return sqlite3.connect(self.db_path)

    def _ensure_db(self):
        conn = self._connect()
        cur = conn.cursor()

        cur.execute("""
        CREATE TABLE IF NOT EXISTS experiment_runs (
            run_id INTEGER PRIMARY KEY AUTOINCREMENT,
            timestamp TEXT,
            command TEXT,
            out_dir TEXT,
            config_digest TEXT,
            exit_status INTEGER
        )
        """)

        cur.execute("""
        CREATE TABLE IF NOT EXISTS run_kpis (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id INTEGER,
            kpi_name TEXT,
            kpi_value REAL,
            FOREIGN KEY(run_id) REFERENCES experiment_runs(run_id)
        )
        """)

        conn.commit()
        conn.close()

    def log_run(self, command, out_dir, config_digest, exit_status=None):
        conn = self._connect()
        cur = conn.cursor()
        ts = datetime.utcnow().isoformat()

        cur.execute("""
            INSERT INTO experiment_runs (timestamp, command, out_dir, config_digest, exit_status)
            VALUES (?, ?, ?, ?, ?)
        """, (ts, command, out_dir, config_digest, exit_status))

        run_id = cur.lastrowid
        conn.commit()
        conn.close()
        return run_id

    def finish_run(self, run_id, exit_status):
        conn = self._connect()
        conn.execute("UPDATE experiment_runs SET exit_status = ? WHERE run_id = ?",
                     (exit_status, run_id))
        conn.commit()
        conn.close()

    def log_kpi(self, run_id, kpi_name, kpi_value):
        conn = self._connect()
        cur = conn.cursor()
        cur.execute(
            "INSERT INTO run_kpis (run_id, kpi_name, kpi_value) VALUES (?, ?, ?)",
            (run_id, kpi_name, None if kpi_value is None else float(kpi_value))
        )
        conn.commit()
        conn.close()

    def kpis(self, run_id):
        conn = self._connect()
        rows = conn.execute("SELECT kpi_name, kpi_value FROM run_kpis WHERE run_id = ? ORDER BY id",
                            (run_id,)).fetchall()
        conn.close()
        return dict(rows)

    def runs(self):
        conn = self._connect()
        rows = conn.execute("SELECT run_id, command, config_digest, exit_status "
                            "FROM experiment_runs ORDER BY run_id").fetchall()
        conn.close()
        return rows
