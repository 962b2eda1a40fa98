#!/usr/bin/env python3
"""Regenerates the bundled demo data under data/.

Output is fully determined by SEED. Embeddings are synthetic: each topic has
a random centre and its words scatter around it, so documents on the same
story sit close together and documents on different topics sit far apart.
"""

import json
import random
from datetime import date, timedelta
from pathlib import Path

import numpy as np

SEED = 20200714
DIM = 50
ROOT = Path(__file__).resolve().parent.parent
DATA = ROOT / "data"

TOPICS = {
    "drinks": """gatorade sports drink drinks sugar beverage beverages ban district
        students cafeteria vending machines soda bottles electrolyte athletes
        nutrition children parents sugary pepsico calories juice milk""",
    "weather": """storm rain flooding hurricane winds forecast coast evacuation
        meteorologists rainfall tropical damage residents outages landfall
        gusts surge shelters flood warnings""",
    "economy": """markets stocks inflation economy rates investors bank shares
        prices growth recession earnings trade dollar bonds traders index
        quarter profits unemployment""",
    "politics": """election senate vote voters campaign candidate governor ballots
        polls congress bill lawmakers primary democrats republicans debate
        legislation majority district""",
    "space": """nasa rocket launch mars orbit astronauts satellite mission
        spacecraft telescope lunar crew capsule booster planet spaceport""",
    "football": """league match goals coach season players stadium striker club
        championship referee penalty fans transfer midfielder trophy""",
    "tech": """smartphone app software privacy users startup data cloud chip
        devices platform encryption update engineers browser servers""",
    "virus": """virus vaccine hospital cases patients masks testing doctors
        infections outbreak quarantine symptoms nurses clinics trial""",
}
SHARED = "water fined banned schools officials city report".split()
FILLER = """said year people new time week according told statement monday
    tuesday wednesday thursday friday percent million local state national
    group public plan decision move news including comment spokesperson
    announced expected months early late""".split()
GLUE = "the of and to in a on for with that by from as at is was".split()
# Tokens deliberately left out of the embedding table.
OOV = ["mcallister", "brandtfield", "okonkwo", "zyqrt"]

SOURCES = [
    ("apnews", "Associated Press"),
    ("bbc", "BBC News"),
    ("cnn", "CNN"),
    ("guardian", "The Guardian"),
    ("nytimes", "The New York Times"),
    ("reuters", "Reuters"),
]

QUERY_DATE = date(2020, 7, 14)
QUERY_URL = "https://viralnews.example/2020/07/14/gatorade-banned-in-schools"


def topic_words(name):
    return TOPICS[name].split()


def make_story(rng, topic, size=14, shared=0):
    words = rng.sample(topic_words(topic), size)
    words += rng.sample(SHARED, shared)
    return words


def sentence(rng, story, weights):
    n = rng.randint(9, 15)
    out = []
    for _ in range(n):
        r = rng.random()
        if r < 0.55:
            out.append(rng.choices(story, weights=weights)[0])
        elif r < 0.75:
            out.append(rng.choice(FILLER))
        else:
            out.append(rng.choice(GLUE))
    out[0] = out[0].capitalize()
    return " ".join(out) + "."


def write_article(rng, story, paragraphs=5, oov=0.0):
    weights = [1.0 / (1 + i * 0.15) for i in range(len(story))]
    paras = []
    for _ in range(paragraphs):
        sents = [sentence(rng, story, weights) for _ in range(3)]
        if rng.random() < oov:
            sents[-1] = sents[-1][:-1] + " " + rng.choice(OOV) + " said."
        paras.append(" ".join(sents))
    return paras


def title_for(rng, story):
    words = story[:2] + rng.sample(story[2:], 3)
    return " ".join(w.capitalize() for w in words)


def paraphrase(rng, story, keep=0.85):
    kept = [w for w in story if rng.random() < keep]
    spare = [w for w in story if w not in kept]
    return kept + spare[: len(spare) // 2]


def page(title, date_iso, authors, paragraphs, site, body_class="article-body"):
    meta_authors = "\n".join(f'    <meta name="author" content="{a}">' for a in authors)
    paras = "\n".join(f"      <p>{p}</p>" for p in paragraphs)
    return f"""<!DOCTYPE html>
<html lang="en">
  <head>
    <meta charset="utf-8">
    <title>{title} | {site}</title>
    <meta property="og:title" content="{title}">
    <meta property="article:published_time" content="{date_iso}T09:30:00Z">
{meta_authors}
    <style>body {{ font-family: sans-serif; }}</style>
    <script>window.analytics = {{ page: "article" }};</script>
  </head>
  <body>
    <nav><a href="/">Home</a> <a href="/world">World</a> <a href="/sport">Sport</a> <a href="/health">Health</a></nav>
    <header><h1 class="headline">{title}</h1></header>
    <aside class="related"><p>Most read: celebrity chef opens new restaurant downtown</p></aside>
    <div class="{body_class}">
{paras}
    </div>
    <footer><p>Copyright {site}. All rights reserved. Terms of use and privacy policy apply.</p></footer>
  </body>
</html>
"""


def slug(title):
    return "-".join(title.lower().split())


def main():
    rng = random.Random(SEED)
    nprng = np.random.default_rng(SEED)

    query_story = (
        ["gatorade", "banned", "schools", "sugar", "drinks", "district", "students", "water"]
        + ["vending", "machines", "nutrition", "parents", "officials", "cafeteria"]
    )
    query_title = "Gatorade Banned In Schools Over Sugar Content"
    query_paras = write_article(rng, query_story, paragraphs=6, oov=0.5)
    query_html = page(query_title, QUERY_DATE.isoformat(), ["Dana Whitlock"], query_paras, "Viral News")

    dup_story = paraphrase(rng, query_story, keep=0.95)
    dup_title = "District Bans Gatorade From Schools Citing Sugar"
    dup_paras = write_article(rng, dup_story, paragraphs=6, oov=0.3)
    dup_url = "https://cnn.example/2020/07/15/health/gatorade-school-ban"
    dup_html = page(dup_title, "2020-07-15", ["Lee Harmon"], dup_paras, "CNN", body_class="zn-body")

    records = []
    topic_names = [t for t in TOPICS if t != "drinks"]
    for src, _ in SOURCES:
        for i in range(10):
            if src in ("reuters", "guardian") and i == 0:
                topic = "drinks"
            else:
                topic = topic_names[(i + len(src)) % len(topic_names)]
            shared = rng.choice([0, 0, 1, 2])
            story = make_story(rng, topic, shared=shared)
            title = title_for(rng, story)
            offset = rng.randint(-20, 20)
            published = QUERY_DATE + timedelta(days=offset)
            records.append(
                {
                    "url": f"https://{src}.example/{published.isoformat().replace('-', '/')}/{slug(title)}",
                    "source_id": src,
                    "title": title,
                    "body": "\n\n".join(write_article(rng, story, oov=0.2)),
                    "published_at": published.isoformat(),
                    "topic": topic,
                }
            )

    near_dup = {
        "url": dup_url,
        "source_id": "cnn",
        "title": dup_title,
        "body": "",
        "published_at": "2020-07-15",
        "authors": ["Lee Harmon"],
        "html": dup_html,
        "topic": "drinks-story",
    }
    query_record = {
        "url": QUERY_URL,
        "source_id": "viralnews",
        "title": query_title,
        "body": "",
        "published_at": QUERY_DATE.isoformat(),
        "authors": ["Dana Whitlock"],
        "html": query_html,
        "topic": "drinks-story",
    }

    def dump(path, rows):
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as f:
            for r in rows:
                r = {k: v for k, v in r.items() if k != "topic"}
                f.write(json.dumps(r, ensure_ascii=False) + "\n")

    fixtures = DATA / "fixtures"
    dump(fixtures / "corpus.jsonl", [query_record, near_dup] + records)
    unrelated = [r for r in records if r["topic"] != "drinks"]
    dump(fixtures / "corpus_unrelated.jsonl", [query_record] + unrelated)
    (fixtures / "pages").mkdir(parents=True, exist_ok=True)
    (fixtures / "pages" / "query.html").write_text(query_html)
    (fixtures / "pages" / "near_duplicate.html").write_text(dup_html)
    plain = page(records[3]["title"], records[3]["published_at"], [], records[3]["body"].split("\n\n"), "AP")
    (fixtures / "pages" / "candidate.html").write_text(plain)

    calib = DATA / "calibration"
    calib.mkdir(parents=True, exist_ok=True)
    pairs = []
    names = list(TOPICS)
    for k in range(12):
        topic = names[k % len(names)]
        story = make_story(rng, topic, shared=rng.choice([0, 1]))
        a = write_article(rng, story)
        b = write_article(rng, paraphrase(rng, story))
        (calib / f"related_{k:02}_a.txt").write_text(title_for(rng, story) + "\n\n" + "\n\n".join(a) + "\n")
        (calib / f"related_{k:02}_b.txt").write_text(title_for(rng, story) + "\n\n" + "\n\n".join(b) + "\n")
        pairs.append({"a_path": f"related_{k:02}_a.txt", "b_path": f"related_{k:02}_b.txt", "related": True})
    for k in range(18):
        # The last few share a topic but tell different stories.
        t1, t2 = rng.sample(names, 2) if k < 12 else (names[k % len(names)],) * 2
        s1 = make_story(rng, t1, shared=rng.choice([0, 1]))
        s2 = make_story(rng, t2, shared=rng.choice([0, 1]))
        (calib / f"unrelated_{k:02}_a.txt").write_text(title_for(rng, s1) + "\n\n" + "\n\n".join(write_article(rng, s1)) + "\n")
        (calib / f"unrelated_{k:02}_b.txt").write_text(title_for(rng, s2) + "\n\n" + "\n\n".join(write_article(rng, s2)) + "\n")
        pairs.append({"a_path": f"unrelated_{k:02}_a.txt", "b_path": f"unrelated_{k:02}_b.txt", "related": False})
    with (calib / "pairs.jsonl").open("w") as f:
        for p in pairs:
            f.write(json.dumps(p) + "\n")

    centres = {t: nprng.normal(0.0, 1.0, DIM) for t in TOPICS}
    vectors = {}
    for t in TOPICS:
        for w in topic_words(t):
            if w not in vectors:
                vectors[w] = centres[t] + nprng.normal(0.0, 0.35, DIM)
    for w in SHARED + FILLER:
        vectors.setdefault(w, nprng.normal(0.0, 0.6, DIM))
    for w in GLUE:
        vectors.setdefault(w, nprng.normal(0.0, 0.3, DIM))
    with (DATA / "embeddings.txt").open("w") as f:
        f.write(f"{len(vectors)} {DIM}\n")
        for w in sorted(vectors):
            f.write(w + " " + " ".join(f"{x:.6f}" for x in vectors[w]) + "\n")

    (DATA / "overrides.json").write_text(
        json.dumps({"cnn.example": {"body": "div.zn-body p", "title": "h1.headline"}}, indent=2) + "\n"
    )


if __name__ == "__main__":
    main()
