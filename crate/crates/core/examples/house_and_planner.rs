//! Generate one house, sample a referring-expression episode in it, and
//! follow the shortest path to the goal one teacher step at a time.

use lad::env::{
    dijkstra_plan, generate_house, observe, sample_episode, teacher_next, EpisodeConfig, GenConfig, PlanGraph, Split,
    Vocab, OBJECT_NAMES, ROOM_NAMES,
};

fn main() -> lad::Result<()> {
    let gen = GenConfig::default();
    let house = generate_house(&gen, 11, "house-11", Split::Train)?;
    println!("{}: {} nodes, {} edges, {} rooms", house.id, house.len(), house.edges.len(), house.rooms.len());
    for (i, room) in house.rooms.iter().enumerate() {
        println!("  room {i}: {:<12} nodes {:?}", ROOM_NAMES[room.room_type], room.nodes);
    }

    let vocab = Vocab::new(gen.num_room_types, gen.num_object_classes);
    let ep = sample_episode(&house, &EpisodeConfig::default(), &vocab, 3, "ep-0", Split::Train)?;
    let target = house.nodes[ep.goal].objects[ep.target_object].class;
    println!("\n\"{}\"", vocab.decode(&ep.instruction));
    println!("start {} -> goal {} ({}), gold length {:.2} m", ep.start, ep.goal, OBJECT_NAMES[target], ep.gold_length);

    let plan = dijkstra_plan(&PlanGraph::from_house(&house), ep.start, ep.goal)?;
    println!("planner path {:?}, length {:.2}", plan.path().unwrap_or(&[]), plan.length().unwrap_or(f64::NAN));

    let mut at = ep.start;
    while at != ep.goal {
        let obs = observe(&house, at)?;
        let next = teacher_next(&house, at, ep.goal)?;
        println!(
            "  at {at:>2} ({:<12}) sees {} neighbours, teacher goes to {next}",
            ROOM_NAMES[house.nodes[at].room_type],
            obs.neighbors.len()
        );
        at = next;
    }
    Ok(())
}
