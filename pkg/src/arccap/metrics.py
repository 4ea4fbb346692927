"""COCO-style caption metrics: corpus BLEU-1..4, ROUGE-L and CIDEr-D.

METEOR and SPICE need external linguistic resources and are reported as
absent (null), never as zero.
"""

from collections import Counter
from dataclasses import dataclass
import json
import math

from .data import tokenize
from .errors import ValidationError

FIELDS = ("B1", "B2", "B3", "B4", "M", "R", "C", "S")
UNSUPPORTED = ("M", "S")


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _tokens(caption):
    return tokenize(caption) if isinstance(caption, str) else list(caption)


class RefCorpus:
    """Tokenized references per image plus n-gram document frequencies."""

    def __init__(self, refs, max_n=4):
        self.refs = {}
        for iid, captions in refs.items():
            if not captions:
                raise ValidationError(f"image {iid!r} has no reference captions")
            self.refs[iid] = tuple(tuple(_tokens(c)) for c in captions)
        self.max_n = max_n
        self.df = Counter()
        for caps in self.refs.values():
            grams = set()
            for c in caps:
                for n in range(1, max_n + 1):
                    grams.update(ngrams(c, n))
            self.df.update(grams)

    def __len__(self):
        return len(self.refs)

    def __contains__(self, iid):
        return iid in self.refs


def _prepare(candidates, refs):
    if not candidates:
        raise ValidationError("candidate set is empty")
    if not isinstance(refs, RefCorpus):
        refs = RefCorpus(refs)
    missing = [iid for iid in candidates if iid not in refs]
    if missing:
        raise ValidationError(f"no references for image {missing[0]!r}")
    # corpus reductions run in a fixed image order
    order = sorted(candidates, key=lambda i: (str(type(i)), i))
    return [(iid, _tokens(candidates[iid])) for iid in order], refs


def bleu(candidates, refs, n=4):
    """Corpus-level BLEU-n with clipped counts and the closest-length brevity penalty."""
    if not 1 <= n <= 4:
        raise ValidationError("BLEU order must be in 1..4")
    items, refs = _prepare(candidates, refs)
    matched = [0] * n
    total = [0] * n
    cand_len = ref_len = 0
    for iid, cand in items:
        references = refs.refs[iid]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in references)[1]
        for k in range(1, n + 1):
            counts = ngrams(cand, k)
            max_ref = Counter()
            for r in references:
                max_ref |= ngrams(r, k)
            matched[k - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[k - 1] += max(len(cand) - k + 1, 0)
    if cand_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / n
    bp = math.exp(min(0.0, 1.0 - ref_len / cand_len))
    return bp * math.exp(log_p)


def lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand, ref, beta=1.2):
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidates, refs, beta=1.2):
    items, refs = _prepare(candidates, refs)
    scores = [max(rouge_l_pair(c, r, beta) for r in refs.refs[iid]) for iid, c in items]
    return sum(scores) / len(scores)


def _tfidf(tokens, n, log_images, df):
    vec = {}
    for g, tf in ngrams(tokens, n).items():
        vec[g] = tf * (log_images - math.log(max(1.0, df[g])))
    norm = math.sqrt(sum(v * v for v in vec.values()))
    return vec, norm


def cider_d(candidates, refs, sigma=6.0, max_n=4):
    """CIDEr-D averaged over images, on the usual 0..10 scale."""
    items, refs = _prepare(candidates, refs)
    if len(refs) < 2:
        raise ValidationError("CIDEr needs at least two images for document frequencies")
    log_images = math.log(len(refs))
    per_image = []
    for iid, cand in items:
        total = 0.0
        for n in range(1, max_n + 1):
            vc, nc = _tfidf(cand, n, log_images, refs.df)
            sims = []
            for ref in refs.refs[iid]:
                vr, nr = _tfidf(ref, n, log_images, refs.df)
                val = sum(min(v, vr[g]) * vr[g] for g, v in vc.items() if g in vr)
                if nc > 0 and nr > 0:
                    val /= nc * nr
                else:
                    val = 0.0
                delta = len(cand) - len(ref)
                sims.append(val * math.exp(-(delta ** 2) / (2 * sigma ** 2)))
            total += sum(sims) / len(sims) * 10.0
        per_image.append(total / max_n)
    return sum(per_image) / len(per_image)


@dataclass(frozen=True)
class MetricReport:
    B1: float
    B2: float
    B3: float
    B4: float
    R: float
    C: float
    M: float = None
    S: float = None

    def to_dict(self):
        return {k: getattr(self, k) for k in FIELDS}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj):
        if list(obj) != list(FIELDS):
            raise ValidationError(f"report keys must be {FIELDS} in order")
        return cls(**obj)


def evaluate_all(candidates, refs):
    refs = refs if isinstance(refs, RefCorpus) else RefCorpus(refs)
    b = [bleu(candidates, refs, n) for n in range(1, 5)]
    return MetricReport(*b, R=rouge_l(candidates, refs), C=cider_d(candidates, refs))


def format_table(reports):
    """Aligned text table, one row per method, columns in report order."""
    width = max([len("Method")] + [len(k) for k in reports])
    lines = [" | ".join(["Method".ljust(width)] + [f.rjust(5) for f in FIELDS])]
    lines.append("-" * len(lines[0]))
    for name, rep in reports.items():
        cells = []
        for f in FIELDS:
            v = getattr(rep, f)
            cells.append("  n/a" if v is None else f"{v:5.3f}")
        lines.append(" | ".join([name.ljust(width)] + cells))
    return "\n".join(lines)
