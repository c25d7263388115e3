"""Synthetic mini-MIND data shipped with the package for offline runs."""

from __future__ import annotations

import random
from importlib import resources
from pathlib import Path

N_USERS = 540

TITLES = {
    "sports": [
        "Eagles win title after overtime thriller",
        "Star striker signs record football contract",
        "Marathon runner breaks course record",
        "Tennis champion withdraws with injury",
        "Basketball playoffs open with upset win",
    ],
    "finance": [
        "Stocks rally as inflation cools",
        "Central bank holds interest rates steady",
        "Tech giant reports record quarterly earnings",
        "Mortgage rates fall for third straight week",
        "Small businesses brace for new tax rules",
    ],
    "health": [
        "New study links sleep to heart health",
        "Flu season arrives early this year",
        "Simple exercises that ease back pain",
        "Doctors warn about summer heat stroke",
        "Hospital opens new cancer research center",
    ],
    "travel": [
        "Hidden beaches worth the long drive",
        "Airline adds direct flights to Lisbon",
        "National parks set new visitor record",
        "How to pack light for a long trip",
        "Historic train route reopens to tourists",
    ],
    "foodanddrink": [
        "Easy weeknight pasta recipes",
        "Chef shares secret to perfect roast chicken",
        "Coffee prices climb as harvest shrinks",
        "Farmers market guide for the fall season",
        "Bakery wins award for sourdough bread",
    ],
    "autos": [
        "Electric pickup truck goes on sale",
        "Carmaker recalls sedans over brake issue",
        "Gas prices dip ahead of holiday travel",
        "Classic car auction sets price record",
        "Self driving taxis expand to new city",
    ],
    "tv": [
        "Streaming drama renewed for second season",
        "Late night host announces retirement",
        "Reality show finale draws huge audience",
        "Cast reunites for sitcom anniversary",
        "Award nominations surprise television critics",
    ],
    "weather": [
        "Winter storm brings heavy snow to plains",
        "Heat wave grips southern states",
        "Hurricane season forecast looks active",
        "Flood warnings issued along the river",
        "Record cold snap hits northern towns",
    ],
}


def generate(seed: int = 2024, n_users: int = N_USERS) -> tuple[str, str]:
    """Return (news.tsv, behaviors.tsv) text for a synthetic corpus.

    Users have two favourite categories; most history items and most clicks
    come from them. A few users get a second impression and a few impressions
    have no click, so the per-user and exclusion rules get exercised.
    """
    rng = random.Random(seed)
    news_lines = []
    by_category: dict[str, list[str]] = {}
    n = 0
    for category, titles in TITLES.items():
        for title in titles:
            n += 1
            nid = f"N{n}"
            by_category.setdefault(category, []).append(nid)
            news_lines.append(f"{nid}\t{category}\t{category}-general\t{title}\tSynthetic abstract.\t\t[]\t[]")
    all_news = [nid for ids in by_category.values() for nid in ids]
    categories = list(by_category)

    behavior_lines = []
    imp_id = 0
    for u in range(1, n_users + 1):
        favourites = rng.sample(categories, 2)
        n_impressions = 2 if u % 25 == 0 else 1
        for k in range(n_impressions):
            history = []
            for _ in range(rng.randint(3, 8)):
                pool = by_category[rng.choice(favourites)] if rng.random() < 0.8 else all_news
                history.append(rng.choice(pool))
            history = list(dict.fromkeys(history))
            pool = by_category[rng.choice(favourites)] if rng.random() < 0.7 else all_news
            clicked = rng.choice([nid for nid in pool if nid not in history] or pool)
            negatives = rng.sample([nid for nid in all_news if nid != clicked and nid not in history], 9)
            label = 0 if u % 97 == 0 and k == 0 else 1
            candidates = [(clicked, label)] + [(nid, 0) for nid in negatives]
            rng.shuffle(candidates)
            imp_id += 1
            behavior_lines.append(
                f"{imp_id}\tU{u}\t11/{11 + k}/2019 9:{u % 60:02d}:00 AM\t{' '.join(history)}\t"
                + " ".join(f"{nid}-{lab}" for nid, lab in candidates)
            )
    return "\n".join(news_lines) + "\n", "\n".join(behavior_lines) + "\n"


def data_dir() -> Path:
    return Path(str(resources.files("recprompt") / "data" / "mini_mind"))


def news_path() -> Path:
    return data_dir() / "news.tsv"


def behaviors_path() -> Path:
    return data_dir() / "behaviors.tsv"


def write(directory: str | Path, seed: int = 2024, n_users: int = N_USERS) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    news, behaviors = generate(seed, n_users)
    (directory / "news.tsv").write_text(news, encoding="utf-8")
    (directory / "behaviors.tsv").write_text(behaviors, encoding="utf-8")


if __name__ == "__main__":
    write(data_dir())
