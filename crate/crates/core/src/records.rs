//! Plain data records shared by every stage: profile and schema aspects,
//! behaviors and labeled samples.

use serde::{Deserialize, Serialize};

/// A closed enumeration used as a profile or schema aspect.
///
/// `None` in an `Option<A>` means "any" (schema) or "unknown" (profile); it
/// gets its own embedding slot at index [`Aspect::COUNT`].
pub trait Aspect: Copy + Eq + 'static {
    const COUNT: usize;
    const ALL: &'static [Self];

    fn index(self) -> usize;

    /// Embedding slot for an optional value.
    fn slot(value: Option<Self>) -> usize {
        value.map_or(Self::COUNT, Self::index)
    }

    /// Rows in an embedding table for this aspect.
    fn vocab() -> usize {
        Self::COUNT + 1
    }
}

macro_rules! aspect {
    ($(#[$m:meta])* $name:ident { $($variant:ident),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl Aspect for $name {
            const ALL: &'static [Self] = &[$($name::$variant),+];
            const COUNT: usize = Self::ALL.len();

            fn index(self) -> usize {
                self as usize
            }
        }
    };
}

aspect!(Gender { Female, Male });

aspect!(LifeStage {
    Pregnancy,
    Infant,
    Kindergarten,
    PrimarySchool,
    MiddleSchool,
    HighSchool,
});

aspect!(
    /// Age bands of the account holder.
    AgeLevel {
        Under18,
        From18To24,
        From25To29,
        From30To34,
        From35To39,
        From40To49,
        Over50,
    }
);

/// Optional-value compatibility: a missing side matches anything.
fn matches<A: PartialEq>(want: Option<A>, have: Option<A>) -> bool {
    match (want, have) {
        (Some(w), Some(h)) => w == h,
        _ => true,
    }
}

/// Who a concept is for. `None` on an aspect means "any".
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSchema {
    #[serde(default)]
    pub gender: Option<Gender>,
    #[serde(default)]
    pub life_stage: Option<LifeStage>,
    #[serde(default)]
    pub age_level: Option<AgeLevel>,
}

impl ConceptSchema {
    /// Embedding slots in the fixed order gender, life stage, age level.
    pub fn slots(&self) -> [usize; 3] {
        [
            Gender::slot(self.gender),
            LifeStage::slot(self.life_stage),
            AgeLevel::slot(self.age_level),
        ]
    }

    /// Table sizes matching [`ConceptSchema::slots`].
    pub fn vocab_sizes() -> [usize; 3] {
        [Gender::vocab(), LifeStage::vocab(), AgeLevel::vocab()]
    }

    /// A schema fits a user unless some aspect is set on both sides and differs.
    /// The life-stage aspect is compared with the user's kid's life stage.
    pub fn compatible_with(&self, profile: &UserProfile) -> bool {
        matches(self.gender, profile.gender)
            && matches(self.life_stage, profile.kid_life_stage)
            && matches(self.age_level, profile.age_level)
    }
}

/// An entity index with a preference weight in (0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weighted {
    pub index: u32,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    pub user: u32,
    #[serde(default)]
    pub gender: Option<Gender>,
    #[serde(default)]
    pub age_level: Option<AgeLevel>,
    #[serde(default)]
    pub kid_gender: Option<Gender>,
    #[serde(default)]
    pub kid_life_stage: Option<LifeStage>,
    #[serde(default)]
    pub preferred_categories: Vec<Weighted>,
    #[serde(default)]
    pub preferred_brands: Vec<Weighted>,
}

impl UserProfile {
    pub fn new(user: u32) -> Self {
        Self {
            user,
            gender: None,
            age_level: None,
            kid_gender: None,
            kid_life_stage: None,
            preferred_categories: Vec::new(),
            preferred_brands: Vec::new(),
        }
    }

    /// Embedding slots in the fixed order gender, age level, kid gender, kid life stage.
    pub fn slots(&self) -> [usize; 4] {
        [
            Gender::slot(self.gender),
            AgeLevel::slot(self.age_level),
            Gender::slot(self.kid_gender),
            LifeStage::slot(self.kid_life_stage),
        ]
    }

    pub fn vocab_sizes() -> [usize; 4] {
        [Gender::vocab(), AgeLevel::vocab(), Gender::vocab(), LifeStage::vocab()]
    }

    /// First weight outside (0, 1], if any.
    pub fn bad_weight(&self) -> Option<f64> {
        self.preferred_categories
            .iter()
            .chain(&self.preferred_brands)
            .map(|w| w.weight)
            .find(|&w| !(w > 0.0 && w <= 1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorType {
    Click,
    Bookmark,
    AddToCart,
    Purchase,
}

impl BehaviorType {
    pub const ALL: [BehaviorType; 4] = [
        BehaviorType::Click,
        BehaviorType::Bookmark,
        BehaviorType::AddToCart,
        BehaviorType::Purchase,
    ];

    /// Feature index: click 0, bookmark 1, cart 2, purchase 3.
    pub fn index(self) -> usize {
        self as usize
    }

    /// Intensity weight of the user→item edge.
    pub fn weight(self) -> f64 {
        match self {
            BehaviorType::Purchase => 1.0,
            BehaviorType::AddToCart => 0.75,
            BehaviorType::Bookmark => 0.5,
            BehaviorType::Click => 0.25,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Behavior {
    pub user: u32,
    pub item: u32,
    #[serde(rename = "type")]
    pub kind: BehaviorType,
    /// Epoch seconds.
    pub time: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub user: u32,
    pub concept: u32,
    pub label: u8,
    /// Snapshot time in epoch seconds.
    pub time: i64,
}

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Whole days since the epoch, rounding toward negative infinity.
pub fn day_of(time: i64) -> i64 {
    time.div_euclid(SECONDS_PER_DAY)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slots_reserve_a_wildcard() {
        assert_eq!(Gender::slot(None), 2);
        assert_eq!(LifeStage::slot(Some(LifeStage::HighSchool)), 5);
        assert_eq!(LifeStage::slot(None), 6);
        assert_eq!(AgeLevel::vocab(), 8);
    }

    #[test]
    fn schema_compatibility() {
        let mut p = UserProfile::new(0);
        p.gender = Some(Gender::Female);
        p.kid_life_stage = Some(LifeStage::Infant);
        let any = ConceptSchema::default();
        assert!(any.compatible_with(&p));
        let male = ConceptSchema {
            gender: Some(Gender::Male),
            ..any
        };
        assert!(!male.compatible_with(&p));
        let infant = ConceptSchema {
            life_stage: Some(LifeStage::Infant),
            ..any
        };
        assert!(infant.compatible_with(&p));
        assert!(infant.compatible_with(&UserProfile::new(1)));
    }

    #[test]
    fn json_rejects_values_outside_enumerations() {
        let ok: ConceptSchema = serde_json::from_str(r#"{"gender":"female","life_stage":"primary_school"}"#).unwrap();
        assert_eq!(ok.life_stage, Some(LifeStage::PrimarySchool));
        assert!(serde_json::from_str::<ConceptSchema>(r#"{"gender":"other"}"#).is_err());
        let b: Behavior = serde_json::from_str(r#"{"user":1,"item":2,"type":"add_to_cart","time":5}"#).unwrap();
        assert_eq!(b.kind, BehaviorType::AddToCart);
    }

    #[test]
    fn day_floor() {
        assert_eq!(day_of(86_399), 0);
        assert_eq!(day_of(86_400), 1);
        assert_eq!(day_of(-1), -1);
    }
}
