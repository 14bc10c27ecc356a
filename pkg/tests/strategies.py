from hypothesis import strategies as st

from enfed.domain import KEY_LEN, DiagnosisKey, RegionId

REGION_POOL = [RegionId(c) for c in ("CH", "IT", "FR", "DE", "AT")]

regions = st.sampled_from(REGION_POOL)
key_bytes = st.binary(min_size=KEY_LEN, max_size=KEY_LEN)
days = st.integers(min_value=0, max_value=60)
diagnosis_keys = st.builds(DiagnosisKey.of, key_bytes, days)


@st.composite
def declarations(draw, pool=REGION_POOL):
    """(declared set S, testing region B) with B in S."""
    s = draw(st.frozensets(st.sampled_from(pool), min_size=1, max_size=len(pool)))
    b = draw(st.sampled_from(sorted(s)))
    return s, b
