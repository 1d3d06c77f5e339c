import sqlite3
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, Field, field_validator

from runner import Trajectory, find_trajectory

DATABASE_PATH = "annotations.db"

ERROR_CATEGORIES = (
    "user_instruction_hallucination",
    "agent_hallucination",
    "domain_policy_violation",
    "contextual_misinterpretation",
)


class DanglingReferenceError(LookupError):
    """Annotation points at a trajectory or event that does not exist."""


class UnknownCategoryError(ValueError):
    def __init__(self, category: str):
        super().__init__(f"unknown category '{category}' (valid: {', '.join(ERROR_CATEGORIES)})")
        self.category = category


def parse_category(name: str) -> str:
    if name not in ERROR_CATEGORIES:
        raise UnknownCategoryError(name)
    return name


class ErrorAnnotation(BaseModel):
    task_id: str = Field(min_length=1)
    trial_index: int = Field(ge=0)
    category: str
    event_index: int = Field(ge=0)
    note: str = ""

    @field_validator("category")
    @classmethod
    def _known_category(cls, value):
        return parse_category(value)


def get_connection(db_path: str = DATABASE_PATH):
    """Create and return a database connection."""
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    return conn


def init_database(db_path: str = DATABASE_PATH):
    """Initialize the database schema."""
    conn = get_connection(db_path)
    cursor = conn.cursor()

    cursor.execute("""
        CREATE TABLE IF NOT EXISTS error_annotations (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            task_id TEXT NOT NULL,
            trial_index INTEGER NOT NULL,
            category TEXT NOT NULL,
            event_index INTEGER NOT NULL,
            note TEXT,
            created_date DATETIME
        )
    """)
    cursor.execute("CREATE INDEX IF NOT EXISTS idx_annotations_category ON error_annotations (category)")
    cursor.execute("CREATE INDEX IF NOT EXISTS idx_annotations_task ON error_annotations (task_id)")

    conn.commit()
    conn.close()


class AnnotationStore:
    """Append-only error annotations over a set of recorded trajectories."""

    def __init__(self, db_path: str = DATABASE_PATH, trajectories: Optional[Sequence[Trajectory]] = None):
        self.db_path = db_path
        self.trajectories = list(trajectories or [])
        init_database(db_path)

    def check_reference(self, annotation: ErrorAnnotation) -> None:
        trajectory = find_trajectory(self.trajectories, annotation.task_id, annotation.trial_index)
        if trajectory is None:
            raise DanglingReferenceError(
                f"no trajectory for task '{annotation.task_id}' trial {annotation.trial_index}"
            )
        if annotation.event_index >= len(trajectory.events):
            raise DanglingReferenceError(
                f"event {annotation.event_index} is outside task '{annotation.task_id}' trial "
                f"{annotation.trial_index} ({len(trajectory.events)} events)"
            )

    def add(self, annotation: ErrorAnnotation) -> int:
        self.check_reference(annotation)
        conn = get_connection(self.db_path)
        cursor = conn.cursor()

        cursor.execute("""
            INSERT INTO error_annotations (task_id, trial_index, category, event_index, note, created_date)
            VALUES (?, ?, ?, ?, ?, ?)
        """, (annotation.task_id, annotation.trial_index, annotation.category, annotation.event_index,
              annotation.note, datetime.now(timezone.utc).isoformat(timespec="seconds")))

        annotation_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return annotation_id

    def query(self, category: Optional[str] = None, task_id: Optional[str] = None) -> List[Dict]:
        """Annotations in insertion order, optionally narrowed by category and task."""
        if category is not None and category not in ERROR_CATEGORIES:
            raise UnknownCategoryError(category)
        clauses, params = [], []
        if category is not None:
            clauses.append("category = ?")
            params.append(category)
        if task_id is not None:
            clauses.append("task_id = ?")
            params.append(task_id)
        where = f"WHERE {' AND '.join(clauses)}" if clauses else ""

        conn = get_connection(self.db_path)
        cursor = conn.cursor()
        cursor.execute(f"SELECT * FROM error_annotations {where} ORDER BY id", params)
        rows = cursor.fetchall()
        conn.close()
        return [dict(row) for row in rows]

    def __len__(self) -> int:
        conn = get_connection(self.db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT COUNT(*) FROM error_annotations")
        count = cursor.fetchone()[0]
        conn.close()
        return count

    def histogram(self) -> Dict[str, int]:
        """Count per category, zeros included."""
        conn = get_connection(self.db_path)
        cursor = conn.cursor()
        cursor.execute("SELECT category, COUNT(*) AS count FROM error_annotations GROUP BY category")
        counts = {row["category"]: row["count"] for row in cursor.fetchall()}
        conn.close()
        return {category: counts.get(category, 0) for category in ERROR_CATEGORIES}


def annotate_error(store: AnnotationStore, annotation: ErrorAnnotation) -> AnnotationStore:
    store.add(annotation)
    return store


def category_histogram(store: AnnotationStore) -> Dict[str, int]:
    return store.histogram()
