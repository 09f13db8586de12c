import threading

import numpy as np
import pytest
import torch

from subjectgen import data
from subjectgen.captioner import CaptionResponse, StubVLMClient, tokenize_caption
from subjectgen.data import image_to_tensor, render_sample, save_png
from subjectgen.errors import ProviderError, RunDirectoryExists
from subjectgen.guidance import (
    FileContextProvider,
    GuidanceConfig,
    RemoteContextProvider,
    ToyModelContextProvider,
    build_reference_set,
    context_guided_sample,
    generate_context,
    run_pipeline,
)
from subjectgen.inversion import (
    ddim_inversion,
    default_null_trajectory,
    guided_denoise,
    null_text_optimize,
    reconstruct,
)
from subjectgen.schedule import make_step_plan
from subjectgen.text import EMPTY_PROMPT, prompt_from_words
from subjectgen.training import TrainConfig


def _context_image():
    arr, _ = render_sample("circle", "blue", "solid", "navy", 16, 16, 8, 32)
    return image_to_tensor(arr)


def _ref_images():
    return [image_to_tensor(render_sample("circle", "red", "striped", bg,
                                          cx, cy, 7, 32)[0])
            for bg, cx, cy in (("white", 16, 16), ("gray", 12, 14))]


def test_guidance_config_validation():
    GuidanceConfig(tau=0)
    GuidanceConfig(tau=50)
    with pytest.raises(ValueError):
        GuidanceConfig(tau=51)
    with pytest.raises(ValueError):
        GuidanceConfig(tau=-1)
    with pytest.raises(ValueError):
        GuidanceConfig(n_steps=0, tau=0)
    with pytest.raises(ValueError):
        GuidanceConfig(scale=-1.0)
    assert GuidanceConfig().to_manifest() == {"tau": 30, "n_steps": 50,
                                              "scale": 7.5}


def test_tau_boundaries_are_bit_identical(pretrained):
    model, sched, _ = pretrained
    plan = make_step_plan(sched, 10)
    prompt = tokenize_caption("a sks subject on a navy background",
                              "sks subject")
    ctx = _context_image()
    inv = ddim_inversion(ctx, prompt, model, plan, sched)
    nulls = null_text_optimize(inv, prompt, model, scale=7.5, inner_steps=3)

    full = context_guided_sample(inv, nulls, prompt, model,
                                 GuidanceConfig(tau=10, n_steps=10))
    assert torch.equal(full, reconstruct(inv, nulls, prompt, model, 7.5))

    off = context_guided_sample(inv, nulls, prompt, model,
                                GuidanceConfig(tau=0, n_steps=10))
    default = model.embed(EMPTY_PROMPT)
    plain = guided_denoise(model, inv.pivot[-1], model.embed(prompt),
                           lambda k: default, plan, sched, 7.5)
    assert torch.equal(off, plain)
    # interior tau sits strictly between the two boundary behaviors
    mid = context_guided_sample(inv, nulls, prompt, model,
                                GuidanceConfig(tau=5, n_steps=10))
    assert not torch.equal(mid, full) and not torch.equal(mid, off)


def test_context_guided_sample_validation(pretrained):
    model, sched, _ = pretrained
    plan = make_step_plan(sched, 10)
    prompt = tokenize_caption("a sks subject", "sks subject")
    inv = ddim_inversion(_context_image(), prompt, model, plan, sched)
    nulls = default_null_trajectory(model, plan)
    with pytest.raises(ValueError):
        context_guided_sample(inv, nulls, prompt, model,
                              GuidanceConfig(tau=30, n_steps=50))
    short = default_null_trajectory(model, make_step_plan(sched, 5))
    with pytest.raises(ValueError):
        context_guided_sample(inv, short, prompt, model,
                              GuidanceConfig(tau=5, n_steps=10))


def test_file_provider_round_trip(tmp_path):
    img = _context_image()
    save_png(tmp_path / "ctx.png", img)
    prov = FileContextProvider(tmp_path / "ctx.png")
    prompt = prompt_from_words(["a", "red", "circle"])
    out = generate_context(prompt, prov, seed=99)
    assert torch.equal(out, img)  # pixel/127.5 - 1 exactly inverts save_png


def test_file_provider_resizes_and_errors(tmp_path):
    from PIL import Image

    arr = np.zeros((64, 64, 3), dtype=np.uint8)
    arr[:32] = 200
    Image.fromarray(arr, "RGB").save(tmp_path / "big.png")
    prov = FileContextProvider(tmp_path / "big.png", image_size=32)
    out = prov.generate(prompt_from_words(["a"]), 0)
    assert out.shape == (3, 32, 32)
    with pytest.raises(ProviderError):
        FileContextProvider(tmp_path / "missing.png").generate(
            prompt_from_words(["a"]), 0)


def test_toy_provider_deterministic(pretrained):
    model, sched, _ = pretrained
    prov = ToyModelContextProvider(model, sched)
    prompt = prompt_from_words(
        "a red circle on a white background".split())
    a = prov.generate(prompt, seed=3)
    b = prov.generate(prompt, seed=3)
    c = prov.generate(prompt, seed=4)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)
    assert a.min() >= -1.0 and a.max() <= 1.0


def test_remote_provider_against_stub_server():
    import uvicorn

    from subjectgen.server import GenerateRequest, StubImageSource, create_app

    app = create_app()
    config = uvicorn.Config(app, host="127.0.0.1", port=8308,
                            log_level="error")
    server = uvicorn.Server(config)
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    import time
    for _ in range(100):
        if server.started:
            break
        time.sleep(0.05)
    try:
        prov = RemoteContextProvider("http://127.0.0.1:8308", retries=1)
        prompt = prompt_from_words(
            "a red square on a white background".split())
        got = prov.generate(prompt, seed=5)
        # byte-path check: identical to decoding the stub's own PNG
        fixture = StubImageSource().render(GenerateRequest(
            prompt="a red square on a white background", seed=5))
        import io

        from PIL import Image

        want = data.image_to_tensor(
            np.array(Image.open(io.BytesIO(fixture)).convert("RGB")))
        assert torch.equal(got, want)
    finally:
        server.should_exit = True
        thread.join(timeout=5)


def test_remote_provider_error_after_retries():
    prov = RemoteContextProvider("http://127.0.0.1:9", retries=1,
                                 retry_wait=0.0, timeout=0.2)
    with pytest.raises(ProviderError, match="2 attempts"):
        prov.generate(prompt_from_words(["a"]), 0)


def test_remote_provider_accepts_endpoint_url():
    # base URL and pasted endpoint URL must hit the same route
    base = RemoteContextProvider("http://host:8008")
    full = RemoteContextProvider("http://host:8008/generate")
    trailing = RemoteContextProvider("http://host:8008/generate/")
    assert base.url == full.url == trailing.url == "http://host:8008"


def test_generate_context_rejects_bad_rank():
    class Bad:
        def generate(self, prompt, seed):
            return torch.zeros(32, 32)

    with pytest.raises(ProviderError):
        generate_context(prompt_from_words(["a"]), Bad(), 0)


def test_build_reference_set(pretrained):
    model, sched, _ = pretrained
    refs = _ref_images()
    rs = build_reference_set(refs, model, sched, p_t=0.2, seed=0)
    assert len(rs) == 2
    assert rs.subject_name == "sks subject"
    for item in rs.items:
        assert item.caption.subject_positions
        assert item.mask.area > 0
        assert item.subject_map is not None
    # deterministic given the same inputs
    rs2 = build_reference_set(refs, model, sched, p_t=0.2, seed=0)
    assert all(torch.equal(a.mask.mask, b.mask.mask)
               for a, b in zip(rs.items, rs2.items))


def test_build_reference_set_precomputed_response(pretrained):
    model, sched, _ = pretrained
    refs = _ref_images()
    resp = CaptionResponse(subject_name="sks subject",
                           image_captions=("a sks subject on a white background",
                                           "a sks subject on a gray background"))
    rs = build_reference_set(refs, model, sched, response=resp)
    assert all(len(it.caption.subject_positions) == 1 for it in rs.items)
    with pytest.raises(ValueError):
        build_reference_set(refs[:1], model, sched, response=resp)


def _fast_cfgs():
    train = TrainConfig(learning_rate=1e-3, steps=5, batch_size=2, seed=0)
    guide = GuidanceConfig(tau=4, n_steps=8)
    return train, guide


def test_run_pipeline_deterministic(pretrained, tmp_path):
    model, sched, _ = pretrained
    train, guide = _fast_cfgs()
    prompt = tokenize_caption("a sks subject on a navy background",
                              "sks subject")
    ctx = tmp_path / "ctx.png"
    save_png(ctx, _context_image())
    prov = FileContextProvider(ctx)
    final1, res1 = run_pipeline(prompt, _ref_images(), prov, train, guide,
                                seed=5, base_model=model, sched=sched,
                                inner_steps=2)
    final2, res2 = run_pipeline(prompt, _ref_images(), prov, train, guide,
                                seed=5, base_model=model, sched=sched,
                                inner_steps=2)
    assert torch.equal(final1, final2)
    assert torch.equal(res1["context"], res2["context"])


def test_run_pipeline_artifacts(pretrained, tmp_path):
    model, sched, _ = pretrained
    train, guide = _fast_cfgs()
    prompt = tokenize_caption("a sks subject on a navy background",
                              "sks subject")
    ctx = tmp_path / "ctx.png"
    save_png(ctx, _context_image())
    run_dir = tmp_path / "run"
    final, res = run_pipeline(prompt, _ref_images(), FileContextProvider(ctx),
                              train, guide, seed=5, base_model=model,
                              sched=sched, out_dir=run_dir, inner_steps=2)
    names = set(res["artifacts"])
    for expected in ("config.json", "references/ref_00.png",
                     "references/mask_00.png", "references/map_01.png",
                     "references/captions_log.json", "loss.csv",
                     "checkpoints/finetuned.zip", "context.png",
                     "trajectory.zip", "output.png"):
        assert expected in names, expected
        assert (run_dir / expected).exists()
    saved = data.load_png(run_dir / "output.png")
    assert torch.allclose(saved, final, atol=1 / 127.5)

    with pytest.raises(RunDirectoryExists):
        run_pipeline(prompt, _ref_images(), FileContextProvider(ctx), train,
                     guide, seed=5, base_model=model, sched=sched,
                     out_dir=run_dir)


def test_run_pipeline_keeps_partial_artifacts(pretrained, tmp_path):
    model, sched, _ = pretrained
    train, guide = _fast_cfgs()
    prompt = tokenize_caption("a sks subject on a navy background",
                              "sks subject")

    class Failing:
        def generate(self, prompt, seed):
            raise ProviderError("backend offline")

    run_dir = tmp_path / "broken-run"
    with pytest.raises(ProviderError):
        run_pipeline(prompt, _ref_images(), Failing(), train, guide, seed=5,
                     base_model=model, sched=sched, out_dir=run_dir,
                     inner_steps=2)
    assert (run_dir / "config.json").exists()
    assert (run_dir / "references/ref_00.png").exists()
    assert (run_dir / "loss.csv").exists()
    assert not (run_dir / "output.png").exists()


def test_run_pipeline_requires_subject_token(pretrained):
    model, sched, _ = pretrained
    train, guide = _fast_cfgs()
    from subjectgen.text import prompt_from_words

    with pytest.raises(ValueError):
        run_pipeline(prompt_from_words(["a", "red", "circle"]), _ref_images(),
                     None, train, guide, seed=0, base_model=model, sched=sched)


def test_run_pipeline_accepts_reference_set(pretrained, tmp_path):
    model, sched, _ = pretrained
    train, guide = _fast_cfgs()
    prompt = tokenize_caption("a sks subject on a navy background",
                              "sks subject")
    rs = build_reference_set(_ref_images(), model, sched)
    ctx = tmp_path / "ctx.png"
    save_png(ctx, _context_image())
    run_dir = tmp_path / "rs-run"
    _, res = run_pipeline(prompt, rs, FileContextProvider(ctx), train, guide,
                          seed=5, base_model=model, sched=sched,
                          out_dir=run_dir, inner_steps=2)
    # captioning skipped: no VLM log artifact
    assert "references/captions_log.json" not in res["artifacts"]
    assert res["reference_set"] is rs
