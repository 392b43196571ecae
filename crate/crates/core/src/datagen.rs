//! Synthetic viewer journeys with genre preferences, carousel context and
//! title-prefix searches.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogCarousel, CatalogIndex, CatalogItem};
use crate::corpus::stream_rng;
use crate::error::{Error, Result};
use crate::story::{AttributeHeader, CarouselRef, Event, SearchEvent, Surface, UserStory, WatchEvent};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_carousels: usize,
    pub n_genres: usize,
    pub rng_seed: u64,
    pub mean_sessions: f64,
    /// Mean events (watches and searches) per user.
    pub mean_events: f64,
    pub rewatch_prob: f64,
    pub search_prob: f64,
    /// Minimum keystroke states typed before a search-surface watch.
    pub prefix_depth: usize,
    /// Earliest story start, Unix seconds.
    pub start_time: i64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 300,
            n_carousels: 24,
            n_genres: 8,
            rng_seed: 0,
            mean_sessions: 24.0,
            mean_events: 44.0,
            rewatch_prob: 0.1,
            search_prob: 0.15,
            prefix_depth: 2,
            start_time: 1_700_000_000,
        }
    }
}

impl WorldConfig {
    /// Expected keystroke searches before a search-surface watch.
    fn mean_searches(&self) -> f64 {
        self.prefix_depth as f64 + 0.5
    }

    /// Mean extra watches per session beyond the first.
    fn extra_watch_rate(&self) -> f64 {
        let per_session = self.mean_events / self.mean_sessions;
        per_session / (1.0 + self.search_prob * self.mean_searches()) - 1.0
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_users == 0 {
            return fail("n_users must be positive".into());
        }
        if self.n_genres == 0 || self.n_items < self.n_genres {
            return fail(format!("need n_items >= n_genres >= 1, got {} items and {} genres", self.n_items, self.n_genres));
        }
        if self.n_items > ADJECTIVES.len() * NOUNS.len() {
            return fail(format!("at most {} distinct titles are available", ADJECTIVES.len() * NOUNS.len()));
        }
        if self.n_carousels == 0 {
            return fail("n_carousels must be positive".into());
        }
        for (name, p) in [("rewatch_prob", self.rewatch_prob), ("search_prob", self.search_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must be in [0, 1]"));
            }
        }
        if self.search_prob > 0.0 && self.prefix_depth == 0 {
            return fail("prefix_depth must be at least 1 when searches are enabled".into());
        }
        if !(self.mean_sessions >= 1.0) {
            return fail("mean_sessions must be at least 1".into());
        }
        if !(self.extra_watch_rate() >= 0.0) {
            return fail(format!(
                "mean_events {} is too small for {} sessions with search_prob {}",
                self.mean_events, self.mean_sessions, self.search_prob
            ));
        }
        Ok(())
    }
}

const ADJECTIVES: &[&str] = &[
    "Amber", "Broken", "Crimson", "Distant", "Electric", "Frozen", "Golden", "Hollow", "Iron", "Jade", "Kindred",
    "Lonely", "Midnight", "Neon", "Obsidian", "Pale", "Quiet", "Restless", "Silver", "Twisted", "Umber", "Velvet",
    "Wandering", "Yellow", "Zealous", "Ashen", "Bitter", "Copper", "Dusty", "Endless", "Fading", "Gentle", "Hidden",
    "Infinite", "Jagged", "Kinetic", "Lucky", "Marble", "Northern", "Open", "Painted", "Rusty", "Savage", "Tender",
    "Violet", "Wicked", "Wild", "Young",
];

const NOUNS: &[&str] = &[
    "Lantern", "Harbor", "Motel", "Orchard", "Pier", "Canyon", "Signal", "Garden", "Highway", "Lighthouse", "Meadow",
    "Frontier", "Station", "Island", "Carnival", "Diner", "Echo", "Forest", "Glacier", "Horizon", "Kingdom", "Lagoon",
    "Mirror", "Nebula", "Outpost", "Prairie", "Quarry", "River", "Static", "Tower", "Valley", "Window", "Anthem",
    "Bridge", "Circuit", "Desert", "Empire", "Fortune", "Gambit", "Hunter", "Journey", "Keeper", "Legacy", "Machine",
    "Nomad", "Oracle", "Parade", "Rebel",
];

const GENRES: &[&str] = &[
    "drama", "comedy", "horror", "thriller", "documentary", "romance", "scifi", "western", "animation", "crime",
    "family", "musical",
];

const THEMES: &[&str] = &[
    "after_dark", "rainy_night", "staff_picks", "trending_now", "hidden_gems", "award_winners", "cult_classics",
    "short_and_sweet", "road_trips", "true_stories", "weekend_binge", "new_arrivals", "leaving_soon", "fan_favorites",
    "late_night_laughs", "slow_burn",
];

const COUNTRIES: &[&str] = &["US", "CA", "MX", "GB", "AU"];
const DEVICES: &[&str] = &["tv", "mobile", "web", "tablet"];

/// A generated catalog plus the structure the simulator draws from.
#[derive(Clone, Debug)]
pub struct World {
    pub catalog: CatalogIndex,
    /// Item indices per genre, most popular first.
    genre_items: Vec<Vec<usize>>,
    /// Carousel index per genre, if the genre has its own row.
    genre_rows: Vec<Option<usize>>,
    theme_rows: Vec<usize>,
}

/// Hidden per-user traits.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentUser {
    pub genre_pref: Vec<f64>,
    pub activity: f64,
    pub country: &'static str,
    pub device: &'static str,
}

fn genre_name(g: usize) -> String {
    GENRES.get(g).map_or_else(|| format!("genre_{g}"), |s| s.to_string())
}

fn theme_name(t: usize) -> String {
    THEMES.get(t).map_or_else(|| format!("theme_{t}"), |s| s.to_string())
}

fn display_name(id: &str) -> String {
    id.split('_')
        .map(|w| {
            let mut c = w.chars();
            c.next().map_or_else(String::new, |f| f.to_uppercase().chain(c).collect())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn build_world(cfg: &WorldConfig) -> Result<World> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.rng_seed, 0);
    let mut titles: Vec<(usize, usize)> =
        (0..ADJECTIVES.len()).flat_map(|a| (0..NOUNS.len()).map(move |n| (a, n))).collect();
    titles.shuffle(&mut rng);

    let width = cfg.n_items.to_string().len().max(3);
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut genre_items = vec![Vec::new(); cfg.n_genres];
    for (i, &(a, n)) in titles[..cfg.n_items].iter().enumerate() {
        let g = i % cfg.n_genres;
        genre_items[g].push(i);
        items.push(CatalogItem {
            item_id: format!("SYN{i:0width$}"),
            title: format!("{} {}", ADJECTIVES[a], NOUNS[n]),
            genre: Some(genre_name(g)),
        });
    }
    for list in &mut genre_items {
        list.shuffle(&mut rng);
    }

    let n_genre_rows = cfg.n_genres.min(cfg.n_carousels);
    let mut carousels = Vec::with_capacity(cfg.n_carousels);
    for c in 0..cfg.n_carousels {
        let id = if c < n_genre_rows { format!("{}_picks", genre_name(c)) } else { theme_name(c - n_genre_rows) };
        carousels.push(CatalogCarousel { name: display_name(&id), carousel_id: id });
    }
    let genre_rows = (0..cfg.n_genres).map(|g| (g < n_genre_rows).then_some(g)).collect();
    let theme_rows = (n_genre_rows..cfg.n_carousels).collect();
    Ok(World { catalog: CatalogIndex::new(items, carousels)?, genre_items, genre_rows, theme_rows })
}

/// Lowercased title prefixes in three-character steps, trailing spaces
/// trimmed.
pub fn keystroke_prefixes(title: &str) -> Vec<String> {
    let lower: Vec<char> = title.to_lowercase().chars().collect();
    let mut out: Vec<String> = Vec::new();
    let mut end = 3;
    loop {
        let cut = end.min(lower.len());
        let q: String = lower[..cut].iter().collect::<String>().trim_end().to_string();
        if !q.is_empty() && out.last() != Some(&q) {
            out.push(q);
        }
        if cut == lower.len() {
            return out;
        }
        end += 3;
    }
}

fn latent_user(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> LatentUser {
    let g = cfg.n_genres;
    let mut genre_pref = vec![if g == 1 { 1.0 } else { 0.1 / g as f64 }; g];
    if g > 1 {
        let first = rng.gen_range(0..g);
        let mut second = rng.gen_range(0..g - 1);
        if second >= first {
            second += 1;
        }
        genre_pref[first] += 0.65;
        genre_pref[second] += 0.25;
    }
    LatentUser {
        genre_pref,
        activity: [0.5, 1.0, 1.5][rng.gen_range(0..3)],
        country: COUNTRIES[rng.gen_range(0..COUNTRIES.len())],
        device: DEVICES[rng.gen_range(0..DEVICES.len())],
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Generates user `index`; depends only on the config, the world and the
/// index.
pub fn generate_user(cfg: &WorldConfig, world: &World, index: usize) -> Result<UserStory> {
    let mut rng = stream_rng(cfg.rng_seed, index as u64 + 1);
    let user = latent_user(cfg, &mut rng);
    let items = world.catalog.items();
    let genre_pick = WeightedIndex::new(&user.genre_pref).map_err(|e| Error::invalid(e.to_string()))?;
    let zipf: Vec<WeightedIndex<f64>> = world
        .genre_items
        .iter()
        .map(|list| WeightedIndex::new((0..list.len()).map(|r| 1.0 / ((r + 1) as f64).powf(0.8))).expect("non-empty genre"))
        .collect();
    let surface_pick = WeightedIndex::new([0.6, 0.25, 0.15]).expect("weights");
    let gap = Exp::new(1.0 / (20.0 * 3600.0)).expect("rate");

    let n_sessions = 1 + poisson(&mut rng, user.activity * (cfg.mean_sessions - 1.0));
    let mut t = cfg.start_time + rng.gen_range(0..7 * 86_400);
    let mut history: Vec<usize> = Vec::new();
    let mut events = Vec::new();
    for s in 0..n_sessions {
        if s > 0 {
            t += 2 * 3600 + gap.sample(&mut rng) as i64;
        }
        let actions = 1 + poisson(&mut rng, cfg.extra_watch_rate());
        for _ in 0..actions {
            let item = if !history.is_empty() && rng.gen_bool(cfg.rewatch_prob) {
                history[rng.gen_range(0..history.len())]
            } else {
                let g = genre_pick.sample(&mut rng);
                world.genre_items[g][zipf[g].sample(&mut rng)]
            };
            history.push(item);
            let entry = &items[item];
            let (surface, carousel) = if rng.gen_bool(cfg.search_prob) {
                let prefixes = keystroke_prefixes(&entry.title);
                let k = (cfg.prefix_depth + usize::from(rng.gen_bool(0.5))).min(prefixes.len());
                for q in &prefixes[..k] {
                    events.push(Event::Search(SearchEvent::new(t, q.clone())));
                    t += rng.gen_range(3..20);
                }
                t += rng.gen_range(5..30);
                (Surface::Search, CarouselRef::none())
            } else {
                let surface = [Surface::Home, Surface::Browse, Surface::Autoplay][surface_pick.sample(&mut rng)];
                let genre = item % cfg.n_genres;
                let row = match world.genre_rows[genre] {
                    Some(r) if world.theme_rows.is_empty() || rng.gen_bool(0.6) => r,
                    _ if !world.theme_rows.is_empty() => world.theme_rows[rng.gen_range(0..world.theme_rows.len())],
                    _ => rng.gen_range(0..world.catalog.carousels().len()),
                };
                (surface, CarouselRef::new(world.catalog.carousels()[row].carousel_id.clone()))
            };
            let minutes = rng.gen_range(5..=120u32);
            events.push(Event::Watch(WatchEvent::new(t, surface, carousel, entry.item_ref(), minutes)));
            t += i64::from(minutes) * 60 + rng.gen_range(30..600);
        }
    }
    let attributes = AttributeHeader::from_pairs([("country", user.country), ("device", user.device)]);
    let width = cfg.n_users.to_string().len().max(5);
    UserStory::new(format!("U{index:0width$}"), attributes, events)
}

/// Builds the catalog and every user's story.
pub fn generate_world(cfg: &WorldConfig) -> Result<(CatalogIndex, Vec<UserStory>)> {
    let world = build_world(cfg)?;
    let stories = (0..cfg.n_users).map(|i| generate_user(cfg, &world, i)).collect::<Result<_>>()?;
    Ok((world.catalog, stories))
}

/// Corpus statistics, one field per population row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldReport {
    #[serde(rename = "Sampled viewers")]
    pub sampled_viewers: usize,
    #[serde(rename = "Unique titles")]
    pub unique_titles: usize,
    #[serde(rename = "Unique carousels")]
    pub unique_carousels: usize,
    #[serde(rename = "Total watches")]
    pub total_watches: usize,
    #[serde(rename = "Total searches")]
    pub total_searches: usize,
    #[serde(rename = "Surfaces")]
    pub surfaces: String,
    #[serde(rename = "Avg. events/viewer")]
    pub avg_events_per_viewer: f64,
    #[serde(rename = "Avg. sessions/viewer")]
    pub avg_sessions_per_viewer: f64,
}

impl WorldReport {
    pub const ROW_NAMES: [&'static str; 8] = [
        "Sampled viewers",
        "Unique titles",
        "Unique carousels",
        "Total watches",
        "Total searches",
        "Surfaces",
        "Avg. events/viewer",
        "Avg. sessions/viewer",
    ];

    pub fn rows(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.sampled_viewers.to_string(),
            self.unique_titles.to_string(),
            self.unique_carousels.to_string(),
            self.total_watches.to_string(),
            self.total_searches.to_string(),
            self.surfaces.clone(),
            format!("{:.2}", self.avg_events_per_viewer),
            format!("{:.2}", self.avg_sessions_per_viewer),
        ];
        Self::ROW_NAMES.into_iter().zip(values).collect()
    }

    pub fn to_table(&self) -> String {
        let mut out = String::from("Statistic              Value\n");
        for (name, value) in self.rows() {
            out.push_str(&format!("{name:<22} {value}\n"));
        }
        out
    }
}

pub fn world_report(stories: &[UserStory]) -> Result<WorldReport> {
    if stories.is_empty() {
        return Err(Error::invalid("world_report needs at least one story"));
    }
    let mut titles = HashSet::new();
    let mut carousels = HashSet::new();
    let mut surfaces = BTreeSet::new();
    let (mut watches, mut searches, mut sessions) = (0, 0, 0);
    for story in stories {
        sessions += story.sessions.len();
        for event in story.events() {
            match event {
                Event::Watch(w) => {
                    watches += 1;
                    surfaces.insert(Surface::ALL.iter().position(|&s| s == w.surface).expect("known surface"));
                    if let Some(item) = &w.item {
                        titles.insert(item.item_id.as_str());
                    }
                    if !w.carousel.is_empty() {
                        carousels.insert(w.carousel.carousel_id.as_str());
                    }
                }
                Event::Search(_) => searches += 1,
            }
        }
    }
    let n = stories.len() as f64;
    let surface_names: Vec<String> = surfaces.iter().map(|&i| display_name(Surface::ALL[i].as_str())).collect();
    Ok(WorldReport {
        sampled_viewers: stories.len(),
        unique_titles: titles.len(),
        unique_carousels: carousels.len(),
        total_watches: watches,
        total_searches: searches,
        surfaces: surface_names.join(", "),
        avg_events_per_viewer: (watches + searches) as f64 / n,
        avg_sessions_per_viewer: sessions as f64 / n,
    })
}
