use promptlab::prompt::{export_file_name, export_product, InitOptions, PromptDims, PromptKind, PromptParams, VanillaPrompt};
use promptlab::tasks::vocab::FIRST_SYMBOL;
use promptlab::tensor::read_records;
use promptlab::{Backbone, BackboneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn stored_product_reproduces_factored_loss_exactly() {
    let mut backbone = Backbone::new(BackboneConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    backbone.set_frozen(true);
    let dims = PromptDims::new(32, 16).with_bottleneck(4);
    let params = PromptParams::init(PromptKind::Decomposed, dims, None, InitOptions::default(), 7).unwrap();
    let PromptParams::Decomposed(dpt) = &params else { unreachable!() };

    let dir = std::env::temp_dir().join(format!("promptlab-export-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(export_file_name(PromptKind::Decomposed, dims, 7));
    let written = export_product(dpt, &path).unwrap();
    let stored = VanillaPrompt::load(&written).unwrap();
    assert_eq!(stored.prompt.shape(), &[32, 16]);

    let records = read_records(std::io::BufReader::new(std::fs::File::open(&written).unwrap())).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].1, dpt.product());

    let factored = params.materialize();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let len = rng.gen_range(1..10);
        let input: Vec<usize> = (0..len).map(|_| rng.gen_range(FIRST_SYMBOL..64)).collect();
        let target = vec![rng.gen_range(FIRST_SYMBOL..64)];
        let (a, _) = backbone.forward(&factored, &input, &target).unwrap();
        let (b, _) = backbone.forward(&stored.prompt, &input, &target).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
    std::fs::remove_dir_all(&dir).unwrap();
}
