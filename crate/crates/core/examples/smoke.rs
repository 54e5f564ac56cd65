//! End-to-end smoke run: synthesize a corpus, train a small decoder for a
//! few steps, round-trip it through a checkpoint, and fill masked slots.

use layoutgen::corpus::synth::{synthesize_corpus, SynthConfig};
use layoutgen::decoder::{
    element_count_histogram, load_decoder, save_decoder, train_decoder, DecoderConfig,
    DecoderExtras,
};
use layoutgen::exec::Parallelism;
use layoutgen::layout::{CategorySchema, SequenceCodec, Vocabulary};
use layoutgen::render::{render_wireframe, RenderConfig};

fn main() -> layoutgen::Result<()> {
    let records = synthesize_corpus(&SynthConfig::default(), 64, 7);
    let layouts: Vec<_> = records.into_iter().map(|r| r.layout).collect();
    println!("synthesized {} layouts", layouts.len());

    let vocab = Vocabulary::new(&CategorySchema::synthetic(), 128)?;
    let mut cfg = DecoderConfig::desk_scale(vocab.clone());
    cfg.num_layers = 1;
    cfg.model_dim = 64;
    cfg.num_heads = 2;
    cfg.image_size = 32;
    cfg.batch_size = 8;
    cfg.warmup_steps = 20;

    let (decoder, report) = train_decoder(
        &layouts,
        cfg.clone(),
        60,
        42,
        Parallelism::default(),
        |step, loss| {
            if step % 10 == 0 {
                println!("step {step}: loss {loss:.4}");
            }
        },
    )?;
    assert!(
        report.final_loss < report.initial_loss,
        "loss did not fall: {} -> {}",
        report.initial_loss,
        report.final_loss
    );

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("decoder.ckpt");
    let extras = DecoderExtras {
        element_count_histogram: element_count_histogram(&layouts, cfg.max_elements),
        training_steps: report.steps,
    };
    save_decoder(&decoder, &extras, &path)?;
    let (reloaded, _) = load_decoder(&path, Some(&vocab))?;
    println!("checkpoint round trip ok ({} params)", reloaded.params().num_scalars());

    let codec = SequenceCodec::new(vocab.clone(), cfg.max_elements);
    let mut seq = codec.encode(&layouts[0])?;
    let masks: Vec<usize> = seq
        .maskable_positions()
        .into_iter()
        .filter(|p| p % 2 == 0)
        .collect();
    seq.apply_masks(&masks)?;
    let image = render_wireframe(
        &layouts[1],
        vocab.num_categories(),
        &RenderConfig { width: cfg.image_size, height: cfg.image_size },
    )?;
    let (filled, confidences) = reloaded.predict_masked(&seq, &image)?;
    assert!(filled.is_complete(), "prediction left masks behind");
    assert_eq!(confidences.len(), masks.len());
    let decoded = codec.decode(&filled)?;
    println!(
        "filled {} masked slots; decoded layout has {} elements",
        masks.len(),
        decoded.len()
    );
    println!("smoke ok");
    Ok(())
}
