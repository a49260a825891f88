# The sequence model writes a location as 21 tokens, one quadtree choice
# at a time, conditioned on retrieved neighbors.  This script trains a
# small model, then compares the ways of reading a location back out:
# greedy, beam search, and sampled candidate pools with rerankers.

import numpy as np

from geotoken import (AlignConfig, Gallery, ModelConfig, TrainConfig,
                      WorldConfig, beam_search, generate, greedy,
                      haversine_km, neighbor_context, sample_pool,
                      select_ideal, select_logprob, select_reward,
                      select_similarity, tokenize_batch, train_align)
from geotoken import seqmodel
from geotoken.rerank import (JudgeClient, JudgeConfig, RecordedJudgeTransport,
                             RewardTrainConfig, train_reward_model)
from geotoken.seqmodel import EncoderInput
from geotoken.synthworld import to_gallery_entries

world = WorldConfig(n_clusters=200, size_min=5, size_max=40, spread_km=10.0,
                    feature_dim=64, noise_sigma=0.35, seed=7)
train, test = generate(world)
enc = train_align(train, AlignConfig(raw_dim=64, proj_dim=32, epochs=8,
                                     batch_size=256, seed=7))
gallery = Gallery.build(to_gallery_entries(train, enc))

mcfg = ModelConfig(d_model=32, n_heads=4, n_layers_enc=1, n_layers_dec=1,
                   d_ffn=64, M=4, input_dims=128)
ids = np.asarray([s.id for s in train])
feats = np.asarray([s.feat for s in train], dtype=np.float32)
_, _, e_img = enc.project_image_batch(feats)
targets = tokenize_batch(np.asarray([s.lat for s in train]),
                         np.asarray([s.lon for s in train]), mcfg.L)
params, curve = seqmodel.train(ids, e_img, targets, gallery, mcfg,
                               TrainConfig(epochs=20, batch_size=64,
                                           dtype="float32"))
print(f"trained {len(curve)} steps, loss {curve[0][1]:.3f} -> {curve[-1][1]:.3f}")

rm = train_reward_model(ids, e_img, np.asarray([s.lat for s in train]),
                        np.asarray([s.lon for s in train]), gallery, params,
                        mcfg, RewardTrainConfig(pool_size=10, n_queries=100))

# encode the test queries once; every decoder reads the same memories
tfeats = np.asarray([s.feat for s in test], dtype=np.float32)
e_it, e_ig, e_timg = enc.project_image_batch(tfeats)
qn, nb_emb, nb_toks = neighbor_context(gallery, e_timg, m=mcfg.M)
memories = seqmodel.encode([EncoderInput(qn[i], nb_emb[i], nb_toks[i])
                            for i in range(len(test))], params, mcfg)

# one query in detail: greedy vs beam vs a sampled pool
mem = memories[0]
g = greedy(mem, params, mcfg)
beam = beam_search(mem, params, mcfg, width=8)
pool = sample_pool(mem, params, mcfg, temperature=0.7, k=20, seed=0)
print(f"\nquery 0, truth ({test[0].lat:.3f}, {test[0].lon:.3f}):")
print(f"  greedy   {g.tokens}  logprob {g.logprob:.2f}")
print(f"  beam[0]  {beam[0].tokens}  logprob {beam[0].logprob:.2f}")
print(f"  pool: {len(set(str(c.tokens) for c in pool))} distinct sequences "
      f"in {len(pool)} draws at T=0.7")

# median error across the split, per strategy
errs = {"greedy": [], "beam8": [], "pool+logprob": [], "pool+reward": [],
        "pool+similarity": [], "pool+ideal": []}
for i, s in enumerate(test):
    mem = memories[i]
    truth = s.location
    pool = sample_pool(mem, params, mcfg, temperature=0.7, k=20, seed=i)
    errs["greedy"].append(haversine_km(greedy(mem, params, mcfg).location, truth))
    errs["beam8"].append(haversine_km(
        beam_search(mem, params, mcfg, width=8)[0].location, truth))
    errs["pool+logprob"].append(haversine_km(select_logprob(pool).location, truth))
    errs["pool+reward"].append(haversine_km(
        select_reward(pool, rm, nb_toks[i]).location, truth))
    errs["pool+similarity"].append(haversine_km(
        select_similarity(pool, e_ig[i], enc).location, truth))
    errs["pool+ideal"].append(haversine_km(select_ideal(pool, truth).location, truth))
print("\nmedian error by strategy (km):")
for name, e in errs.items():
    print(f"  {name:16s} {np.median(e):8.1f}")

# the external judge speaks free text; replies that fail to parse fall
# back to the log-probability pick, and the result says so
pool = sample_pool(memories[0], params, mcfg, temperature=0.7, k=5, seed=0)
echo = f"{pool[2].location.lat_deg:.6f}, {pool[2].location.lon_deg:.6f}"
transport = RecordedJudgeTransport([echo, "somewhere tropical, probably"])
client = JudgeClient(JudgeConfig(retries=0), transport=transport)
for _ in range(2):
    r = client.select(pool)
    print(f"\njudge says {r.response!r}\n  -> picked index {r.selected_index}, "
          f"fallback={r.fallback}, reason={r.reason}")
