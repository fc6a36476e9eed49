//! Build the visual room codebook from synthetic room samples, measure how
//! often the nearest room sum recovers the true room of a node view, and
//! imagine goal vectors for a few instructions.

use lad::codebook::{imagine_episode, CodebookConfig, CodebookKind};
use lad::env::{generate_dataset, DataConfig, Split, ROOM_NAMES};
use lad::train::codebook_for;

fn main() -> lad::Result<()> {
    let data = generate_dataset(&DataConfig { train_houses: 20, val_unseen_houses: 5, ..DataConfig::default() }, 1)?;
    for kind in [CodebookKind::Visual, CodebookKind::Textual] {
        let cb = codebook_for(&data, kind, &CodebookConfig::default())?.expect("has a codebook");
        let (mut hits, mut total) = (0, 0);
        for house in data.houses.values().filter(|h| h.split == Split::ValUnseen) {
            for node in &house.nodes {
                let mean: Vec<f64> = (0..cb.dim())
                    .map(|j| node.views.iter().map(|v| v[j]).sum::<f64>() / node.views.len() as f64)
                    .collect();
                hits += usize::from(cb.nearest_room(&mean) == node.room_type);
                total += 1;
            }
        }
        println!(
            "{:<8} codebook: {} rooms x {} entries, nearest-room accuracy on unseen nodes {:.3} (chance {:.3})",
            kind.name(),
            cb.rooms,
            cb.per_room,
            hits as f64 / total as f64,
            1.0 / cb.rooms as f64
        );
    }

    let vocab = data.vocab();
    let protos = data.config.house.prototypes();
    for ep in data.episodes(Split::ValUnseen).iter().take(3) {
        let im = imagine_episode(ep, &vocab, &protos, 0.2, 0)?;
        let house = data.house(&ep.house_id)?;
        let spread: f64 = im.vectors.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>()
            / im.vectors.len() as f64;
        println!(
            "{:<28} goal room {:<12} {} imagined vectors, mean norm {spread:.2}",
            vocab.decode(&ep.instruction),
            ROOM_NAMES[house.nodes[ep.goal].room_type],
            im.vectors.len()
        );
    }
    Ok(())
}
