import json
import os
from datetime import datetime

from .utils import output_root

ISSUE_LOG_NAME = "issues.json"


class IssueLogger:
    """Append-only JSON trail of failed runs under <out-root>/governance/."""

    def __init__(self, root=None):
        self.directory = os.path.join(root or output_root(), "governance")
        self.path = os.path.join(self.directory, ISSUE_LOG_NAME)
        os.makedirs(self.directory, exist_ok=True)

        # If file doesn't exist or is empty, initialize it
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            with open(self.path, "w") as f:
                json.dump([], f)

    def read(self):
        try:
            with open(self.path, "r") as f:
                return json.load(f)
        except json.JSONDecodeError:
            # Auto heal corrupted file
            return []

    def log_issue(self, issue_type, description, severity, source):
        now = datetime.now()
        issues = self.read()
        issue_id = f"ISSUE-{int(now.timestamp())}-{len(issues) + 1}"

        issues.append({
            "id": issue_id,
            "timestamp": now.strftime("%Y-%m-%d %H:%M:%S"),
            "type": issue_type,
            "severity": severity,
            "source": source,
            "description": description
        })

        with open(self.path, "w") as f:
            json.dump(issues, f, indent=4)

        return issue_id
