use georefine::grid::{compose_grid, emit_grid, grid_size, GUTTER};
use georefine::model::{infer, render_planes, Ablation};
use georefine::selftest::{object_views, tiny_model};

#[test]
fn grid_is_deterministic_with_white_normal_background() {
    let mut model = tiny_model(3).unwrap();
    model.attach_refiner(Ablation::None, 4).unwrap();
    let cond = object_views(8, 2, model.config.image_res).unwrap();
    let states = infer(&model, &cond, 2).unwrap();
    let gts: Vec<_> = cond.iter().map(|v| v.subsample(16).unwrap()).collect();

    let dir = tempfile::tempdir().unwrap();
    let a = emit_grid(&model, &states, &gts, &dir.path().join("a.png")).unwrap();
    let b = compose_grid(&model, &states, &gts).unwrap();
    assert_eq!(a, b);
    let bytes_a = std::fs::read(dir.path().join("a.png")).unwrap();
    emit_grid(&model, &states, &gts, &dir.path().join("b.png")).unwrap();
    assert_eq!(bytes_a, std::fs::read(dir.path().join("b.png")).unwrap());

    let r = 16;
    assert_eq!((a.width, a.height), grid_size(2, 2, r));
    for (row, state) in states.iter().enumerate() {
        for (k, gt) in gts.iter().enumerate() {
            let mask = render_planes(&model, &state.planes, &gt.camera, r).unwrap().mask();
            let x0 = GUTTER + (1 + gts.len() + k) * (r + GUTTER);
            let y0 = GUTTER + row * (r + GUTTER);
            for (i, &m) in mask.iter().enumerate() {
                if m < 0.5 {
                    assert_eq!(a.get(x0 + i % r, y0 + i / r), [255, 255, 255]);
                }
            }
        }
    }
}
