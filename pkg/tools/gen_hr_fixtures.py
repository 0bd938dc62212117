#!/usr/bin/env python3
"""Regenerates the bundled HR fixture data (seeded, stable output).

Run from the repo root:  python3 tools/gen_hr_fixtures.py
"""
from __future__ import annotations

import json
import random
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "agentmesh" / "data" / "hr"

FIRST = ["ada", "grace", "alan", "edsger", "barbara", "donald", "radia", "vint",
         "margaret", "dennis", "ken", "lynn", "anita", "john", "frances", "tim"]
LAST = ["lovelace", "hopper", "turing", "dijkstra", "liskov", "knuth", "perlman",
        "cerf", "hamilton", "ritchie", "thompson", "conway", "borg", "backus",
        "allen", "berners"]

TITLES = {
    "ML Engineer": ["python", "ml", "pytorch", "tensorflow", "mlops", "numpy"],
    "Data Scientist": ["python", "ml", "statistics", "pandas", "sql"],
    "Software Engineer": ["java", "go", "python", "distributed systems", "kubernetes"],
    "Data Engineer": ["sql", "spark", "python", "airflow", "etl"],
    "DevOps Engineer": ["kubernetes", "terraform", "aws", "ci/cd", "linux"],
    "Security Analyst": ["threat modeling", "siem", "python", "forensics"],
    "Product Manager": ["roadmaps", "analytics", "sql", "user research"],
    "UX Designer": ["figma", "prototyping", "user research", "accessibility"],
}
GENERIC_SKILLS = ["git", "communication", "agile", "documentation", "testing"]
LOCATIONS = ["remote", "new york", "london", "berlin", "san francisco", "austin", "toronto"]
LEVELS = ["junior", "senior", "staff"]


def gen_profiles(rng: random.Random, n: int = 500) -> list[dict]:
    profiles = []
    titles = list(TITLES)
    for i in range(n):
        title = titles[i % len(titles)]
        pool = TITLES[title]
        k = rng.randint(2, min(4, len(pool)))
        skills = sorted(rng.sample(pool, k) + rng.sample(GENERIC_SKILLS, 2))
        profiles.append({
            "id": f"p-{i:04d}",
            "name": f"{rng.choice(FIRST)} {rng.choice(LAST)}",
            "title": title,
            "skills": skills,
            "location": rng.choice(LOCATIONS),
            "level": rng.choice(LEVELS),
            "years_experience": rng.randint(1, 18),
        })
    return profiles


def gen_calendars(rng: random.Random) -> dict:
    days = [f"2026-03-{d:02d}" for d in range(2, 7)]  # mon..fri
    hours = [f"{h:02d}:00" for h in range(9, 17)]
    interviewers = {}
    for i in range(12):
        free = sorted(rng.sample([f"{d}T{h}" for d in days for h in hours], 14))
        interviewers[f"i-{i + 1:02d}"] = free
    # guarantee one slot every small panel shares, so scheduling always lands
    shared = "2026-03-04T14:00"
    for slots in interviewers.values():
        if shared not in slots:
            slots.append(shared)
            slots.sort()
    return {"interviewers": interviewers}


def gen_feedback(rng: random.Random, profiles: list[dict]) -> list[dict]:
    phrases = [
        "strong on fundamentals", "communicates clearly", "needs deeper system design",
        "excellent problem decomposition", "solid coding round", "great collaboration signals",
        "some gaps in testing practice", "impressive ml background",
    ]
    records = []
    for p in profiles[:80]:
        for interviewer in rng.sample([f"i-{i + 1:02d}" for i in range(12)], 3):
            records.append({
                "candidate_id": p["id"],
                "interviewer": interviewer,
                "rating": rng.randint(2, 5),
                "comment": rng.choice(phrases),
            })
    return records


ONBOARDING = {
    "junior": [
        "complete security and compliance training",
        "set up development environment",
        "meet your onboarding buddy",
        "read the team runbook",
        "attend new-hire orientation",
    ],
    "senior": [
        "complete security and compliance training",
        "set up development environment",
        "review architecture decision records",
        "meet partner team leads",
        "attend new-hire orientation",
        "shadow an on-call rotation",
    ],
    "staff": [
        "complete security and compliance training",
        "set up development environment",
        "review architecture decision records",
        "meet org leadership",
        "attend new-hire orientation",
        "draft a 90-day technical charter",
    ],
}


def main() -> None:
    rng = random.Random(20260302)
    OUT.mkdir(parents=True, exist_ok=True)
    profiles = gen_profiles(rng)
    (OUT / "profiles.json").write_text(json.dumps(profiles, indent=1, sort_keys=True) + "\n")
    (OUT / "calendars.json").write_text(
        json.dumps(gen_calendars(rng), indent=1, sort_keys=True) + "\n")
    (OUT / "feedback.json").write_text(
        json.dumps(gen_feedback(rng, profiles), indent=1, sort_keys=True) + "\n")
    (OUT / "onboarding.json").write_text(json.dumps(ONBOARDING, indent=1, sort_keys=True) + "\n")
    print(f"wrote fixtures to {OUT}")


if __name__ == "__main__":
    main()
