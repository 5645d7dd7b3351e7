use super::*;

use rand::Rng;

fn cfg(layout: &str, n_agents: usize, n_shelves: usize, n_requested: usize) -> EnvConfig {
    let mut c = EnvConfig::from_layout("test", Layout::parse(layout).unwrap(), n_agents);
    c.n_shelves = n_shelves;
    c.n_requested = n_requested;
    c.episode_limit = 20;
    c
}

fn pose(row: usize, col: usize, heading: Heading) -> AgentPose {
    AgentPose {
        pos: Pos::new(row, col),
        heading,
    }
}

fn state(agents: Vec<AgentPose>, shelves: Vec<ShelfPlace>, requested: &[usize]) -> WarehouseState {
    let mut carrying = vec![None; agents.len()];
    for (s, place) in shelves.iter().enumerate() {
        if let ShelfPlace::Carried(a) = place {
            carrying[*a] = Some(s);
        }
    }
    WarehouseState {
        agents,
        carrying,
        shelves,
        requested: requested.iter().copied().collect(),
        step: 0,
    }
}

fn acts(a: &[Action]) -> JointAction {
    JointAction(a.to_vec())
}

#[test]
fn reset_is_deterministic() {
    let c = EnvConfig::preset("tiny-2ag").unwrap();
    let mut a = Warehouse::new(c.clone()).unwrap();
    let mut b = Warehouse::new(c).unwrap();
    let oa = a.reset(17).unwrap();
    let ob = b.reset(17).unwrap();
    assert_eq!(a.state(), b.state());
    assert_eq!(oa, ob);
    let oc = b.reset(18).unwrap();
    assert!(a.state() != b.state() || oa != oc);
}

#[test]
fn single_cell_grid() {
    let c = cfg("1 1\n.\n", 1, 0, 0);
    let env = Warehouse::new(c).unwrap();
    assert_eq!(env.state().agents[0].pos, Pos::new(0, 0));
    assert!(env.state().shelves.is_empty());
}

#[test]
fn infeasible_placement() {
    let c = cfg("1 2\n.S\n", 2, 1, 0);
    assert!(matches!(Warehouse::new(c), Err(Error::Placement(_))));
}

#[test]
fn tiny_reset_invariants_over_many_seeds() {
    let c = EnvConfig::preset("tiny-2ag").unwrap();
    let mut env = Warehouse::new(c.clone()).unwrap();
    for seed in 0..1000 {
        let obs = env.reset(seed).unwrap();
        env.state().check_invariants(&c).unwrap();
        assert_eq!(env.state().step, 0);
        assert_eq!(obs.len(), 2);
        assert!(obs.iter().all(|o| o.len() == obs_dim(&c)));
        assert_eq!(obs, env.observe_all());
    }
}

#[test]
fn all_noop_only_advances_clock() {
    let mut env = Warehouse::new(EnvConfig::preset("tiny-2ag").unwrap()).unwrap();
    let before = env.state().clone();
    let out = env.step(&acts(&[Action::Noop, Action::Noop])).unwrap();
    assert_eq!(out.reward, 0.0);
    let mut after = env.state().clone();
    assert_eq!(after.step, 1);
    after.step = 0;
    assert_eq!(after, before);
}

#[test]
fn action_count_must_match() {
    let mut env = Warehouse::new(EnvConfig::preset("tiny-2ag").unwrap()).unwrap();
    assert!(matches!(env.step(&acts(&[Action::Noop])), Err(Error::Action(_))));
}

#[test]
fn forward_onto_goal_delivers() {
    // S.S
    // .A.   agent faces south carrying requested shelf 0
    // .G.
    let c = cfg("3 3\nS.S\n...\n.G.\n", 1, 2, 1);
    let st = state(
        vec![pose(1, 1, Heading::South)],
        vec![ShelfPlace::Carried(0), ShelfPlace::Floor(Pos::new(0, 2))],
        &[0],
    );
    let mut env = Warehouse::from_state(c.clone(), st, 3).unwrap();
    let out = env.step(&acts(&[Action::Forward])).unwrap();
    assert_eq!(out.reward, 1.0);
    assert_eq!(out.deliveries, 1);
    assert_eq!(env.state().agents[0].pos, Pos::new(2, 1));
    // the only other shelf becomes the request
    assert_eq!(env.state().requested.iter().copied().collect::<Vec<_>>(), vec![1]);
    env.state().check_invariants(&c).unwrap();
    // staying on the goal with the now unrequested shelf pays nothing
    let out = env.step(&acts(&[Action::Noop])).unwrap();
    assert_eq!(out.reward, 0.0);
}

#[test]
fn head_on_collision_cancels_both() {
    let c = cfg("1 3\n...\n", 2, 0, 0);
    let st = state(
        vec![pose(0, 0, Heading::East), pose(0, 2, Heading::West)],
        vec![],
        &[],
    );
    let mut env = Warehouse::from_state(c, st.clone(), 0).unwrap();
    let out = env.step(&acts(&[Action::Forward, Action::Forward])).unwrap();
    assert_eq!(out.reward, 0.0);
    assert_eq!(env.state().agents, st.agents);
}

#[test]
fn swap_is_cancelled() {
    let c = cfg("1 2\n..\n", 2, 0, 0);
    let st = state(
        vec![pose(0, 0, Heading::East), pose(0, 1, Heading::West)],
        vec![],
        &[],
    );
    let mut env = Warehouse::from_state(c, st.clone(), 0).unwrap();
    env.step(&acts(&[Action::Forward, Action::Forward])).unwrap();
    assert_eq!(env.state().agents, st.agents);
}

#[test]
fn blocked_chain_cancels_followers() {
    // B at the east wall cannot move, so A behind it stays too
    let c = cfg("1 2\n..\n", 2, 0, 0);
    let st = state(
        vec![pose(0, 0, Heading::East), pose(0, 1, Heading::East)],
        vec![],
        &[],
    );
    let mut env = Warehouse::from_state(c, st.clone(), 0).unwrap();
    env.step(&acts(&[Action::Forward, Action::Forward])).unwrap();
    assert_eq!(env.state().agents, st.agents);
}

#[test]
fn follower_moves_into_vacated_cell() {
    let c = cfg("1 3\n...\n", 2, 0, 0);
    let st = state(
        vec![pose(0, 0, Heading::East), pose(0, 1, Heading::East)],
        vec![],
        &[],
    );
    let mut env = Warehouse::from_state(c, st, 0).unwrap();
    env.step(&acts(&[Action::Forward, Action::Forward])).unwrap();
    let cols: Vec<usize> = env.state().agents.iter().map(|a| a.pos.col).collect();
    assert_eq!(cols, vec![1, 2]);
}

#[test]
fn carrier_cannot_enter_shelf_cell_but_empty_agent_can() {
    let c = cfg("1 3\n.SS\n", 1, 2, 1);
    let st = state(
        vec![pose(0, 1, Heading::East)],
        vec![ShelfPlace::Carried(0), ShelfPlace::Floor(Pos::new(0, 2))],
        &[1],
    );
    let mut env = Warehouse::from_state(c.clone(), st, 0).unwrap();
    env.step(&acts(&[Action::Forward])).unwrap();
    assert_eq!(env.state().agents[0].pos, Pos::new(0, 1));
    // put the shelf down, then walk under the other one
    env.step(&acts(&[Action::LoadUnload])).unwrap();
    assert_eq!(env.state().carrying[0], None);
    env.step(&acts(&[Action::Forward])).unwrap();
    assert_eq!(env.state().agents[0].pos, Pos::new(0, 2));
    env.step(&acts(&[Action::LoadUnload])).unwrap();
    assert_eq!(env.state().carrying[0], Some(1));
    env.state().check_invariants(&c).unwrap();
}

#[test]
fn unload_needs_free_slot() {
    let c = cfg("1 2\n.S\n", 1, 1, 0);
    let st = state(vec![pose(0, 0, Heading::East)], vec![ShelfPlace::Carried(0)], &[]);
    let mut env = Warehouse::from_state(c, st, 0).unwrap();
    env.step(&acts(&[Action::LoadUnload])).unwrap();
    assert_eq!(env.state().carrying[0], Some(0));
}

#[test]
fn turns_rotate_heading() {
    assert_eq!(Heading::North.left(), Heading::West);
    assert_eq!(Heading::West.right(), Heading::North);
    assert_eq!(Heading::South.right().right(), Heading::North);
}

#[test]
fn observe_empty_interior() {
    let c = cfg("5 5\n.....\n.....\n.....\n.....\n.....\n", 1, 0, 0);
    let st = state(vec![pose(2, 2, Heading::North)], vec![], &[]);
    let env = Warehouse::from_state(c, st, 0).unwrap();
    let o = env.observe(0).unwrap();
    assert_eq!(o.len(), 9 * 5 + 5);
    assert!(o.as_slice()[..45].iter().all(|&v| v == 0.0));
    assert_eq!(&o.as_slice()[45..], &[1.0, 0.0, 0.0, 0.0, 0.0]);
    assert!(env.observe(1).is_err());
}

#[test]
fn observe_corner_walls() {
    let c = cfg("5 5\n.....\n.....\n.....\n.....\n.....\n", 1, 0, 0);
    let st = state(vec![pose(0, 0, Heading::East)], vec![], &[]);
    let env = Warehouse::from_state(c, st, 0).unwrap();
    let o = env.observe(0).unwrap();
    let wall: Vec<f64> = (0..9).map(|k| o.as_slice()[k * 5]).collect();
    // window rows -1..=1, cols -1..=1: top row and left column are outside
    assert_eq!(wall, vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn observe_shelf_north() {
    let c = cfg("5 5\n.....\n..S..\n.....\n.....\n....S\n", 1, 2, 1);
    let st = state(
        vec![pose(2, 2, Heading::North)],
        vec![ShelfPlace::Floor(Pos::new(1, 2)), ShelfPlace::Floor(Pos::new(4, 4))],
        &[0],
    );
    let env = Warehouse::from_state(c, st, 0).unwrap();
    let o = env.observe(0).unwrap();
    // offset (-1, 0) is window cell 1: features start at 5
    let shelf_flags: Vec<usize> = (0..9).filter(|k| o.as_slice()[k * 5 + 2] == 1.0).collect();
    assert_eq!(shelf_flags, vec![1]);
    assert_eq!(o.as_slice()[7], 1.0);
    assert_eq!(o.as_slice()[8], 1.0, "requested flag");
    assert!(o.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn render_glyphs() {
    let c = cfg("2 2\n..\n..\n", 1, 0, 0);
    let empty = WarehouseState {
        agents: vec![],
        carrying: vec![],
        shelves: vec![],
        requested: BTreeSet::new(),
        step: 0,
    };
    assert_eq!(render_ascii(&c, &empty), "..\n..\n");
    let st = state(vec![pose(0, 0, Heading::North)], vec![], &[]);
    let env = Warehouse::from_state(c, st, 0).unwrap();
    let text = env.render_ascii();
    assert_eq!(text.lines().next().unwrap().chars().next(), Some('A'));
    let tiny = Warehouse::new(EnvConfig::preset("tiny-2ag").unwrap()).unwrap();
    assert_eq!(tiny.render_ascii().lines().count(), 10);
}

#[test]
fn done_exactly_at_limit() {
    let mut c = EnvConfig::preset("micro-2ag").unwrap();
    c.episode_limit = 7;
    let mut env = Warehouse::new(c).unwrap();
    for t in 1..=7 {
        let out = env.step(&acts(&[Action::Noop, Action::Noop])).unwrap();
        assert_eq!(out.done, t == 7);
    }
    assert!(matches!(
        env.step(&acts(&[Action::Noop, Action::Noop])),
        Err(Error::EpisodeDone)
    ));
}

/// Counts deliveries from the state transition alone.
fn count_deliveries(env: &Warehouse, before: &WarehouseState, after: &WarehouseState) -> usize {
    after
        .carrying
        .iter()
        .enumerate()
        .filter(|(a, c)| {
            c.is_some_and(|s| before.requested.contains(&s))
                && env.config().goal_cells.contains(&after.agents[*a].pos)
        })
        .count()
}

#[test]
fn random_walk_invariants() {
    let c = EnvConfig::preset("micro-2ag").unwrap();
    let mut total = 0.0;
    for seed in 0..50 {
        let mut env = Warehouse::new(c.clone()).unwrap();
        env.reset(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..400 {
            if env.is_done() {
                env.reset(rng.gen()).unwrap();
            }
            let before = env.state().clone();
            let a = JointAction::from_indices(&[rng.gen_range(0..5), rng.gen_range(0..5)]).unwrap();
            let out = env.step(&a).unwrap();
            env.state().check_invariants(&c).unwrap();
            assert_eq!(out.reward, count_deliveries(&env, &before, env.state()) as f64);
            total += out.reward;
        }
    }
    assert!(total > 0.0, "random play should deliver occasionally");
}

#[test]
fn global_state_layout() {
    let env = Warehouse::new(EnvConfig::preset("micro-2ag").unwrap()).unwrap();
    let s = env.global_state();
    assert_eq!(s.len(), env.state_dim());
    // each agent has exactly one row, one column and one heading bit
    let per = 5 + 5 + 5;
    for a in 0..2 {
        let block = &s[a * per..(a + 1) * per];
        assert_eq!(block[..5].iter().sum::<f64>(), 1.0);
        assert_eq!(block[5..10].iter().sum::<f64>(), 1.0);
        assert_eq!(block[10..14].iter().sum::<f64>(), 1.0);
    }
    let grid = &s[2 * per..];
    assert_eq!(grid.iter().step_by(2).sum::<f64>(), 2.0);
    assert_eq!(grid.iter().skip(1).step_by(2).sum::<f64>(), 1.0);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn rollout(preset: &str, seed: u64, actions: &[usize]) -> Vec<(f64, bool, WarehouseState)> {
        let c = EnvConfig::preset(preset).unwrap();
        let n = c.n_agents;
        let mut env = Warehouse::new(c.clone()).unwrap();
        env.reset(seed).unwrap();
        let mut out = Vec::new();
        for chunk in actions.chunks_exact(n) {
            if env.is_done() {
                env.reset(seed.wrapping_add(out.len() as u64)).unwrap();
            }
            let before = env.state().requested.clone();
            let o = env.step(&JointAction::from_indices(chunk).unwrap()).unwrap();
            env.state().check_invariants(&c).unwrap();
            assert_eq!(o.reward, o.deliveries as f64);
            assert!(o.deliveries <= before.len());
            out.push((o.reward, o.done, env.state().clone()));
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn random_play_keeps_invariants(seed in any::<u64>(), actions in proptest::collection::vec(0usize..N_ACTIONS, 2..400)) {
            let a = rollout("tiny-2ag", seed, &actions);
            let b = rollout("tiny-2ag", seed, &actions);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn four_agent_play_keeps_invariants(seed in any::<u64>(), actions in proptest::collection::vec(0usize..N_ACTIONS, 4..400)) {
            rollout("small-4ag", seed, &actions);
        }
    }
}
