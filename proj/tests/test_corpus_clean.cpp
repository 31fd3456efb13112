// Copyright 2026 The slmkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


#include <gtest/gtest.h>

#include <random>
#include <string>

#include "slm/corpus_clean.hpp"
#include "slm/error.hpp"
#include "slm/unicode.hpp"

namespace slm::clean {
namespace {

class CleanTextTest : public ::testing::Test {
 protected:
  CleaningConfig cfg = CleaningConfig::defaults();
  std::string clean(const std::string& s) { return clean_text(s, cfg); }
};

TEST_F(CleanTextTest, FullWidthPunctuationBecomesJapaneseMarks) {
  EXPECT_EQ(clean("血圧が高い．"), "血圧が高い。");
  EXPECT_EQ(clean("薬，水"), "薬、水");
}

TEST_F(CleanTextTest, NfkcFoldsFullWidthAlphanumerics) {
  EXPECT_EQ(clean("ＡＢＣ１２３"), "ABC123");
}

TEST_F(CleanTextTest, EllipsisAndDegreesRestored) {
  EXPECT_EQ(clean("37°C..."), "37℃…");
  EXPECT_EQ(clean("待つ…"), "待つ…");
}

TEST_F(CleanTextTest, WhitespaceRunsCollapseToMetaSpace) {
  EXPECT_EQ(clean("投与 量"), "投与▁量");
  EXPECT_EQ(clean("投与 \t　量"), "投与▁量");
}

TEST_F(CleanTextTest, LineBreaksSurviveAndCrlfIsNormalized) {
  EXPECT_EQ(clean("一行目。\r\n二行目。"), "一行目。\n二行目。");
}

TEST_F(CleanTextTest, RemovesContactDetailsAndWebNoise) {
  EXPECT_EQ(clean("連絡: a@b.jp まで"), "連絡:▁まで");
  EXPECT_EQ(clean("電話09012345678です"), "電話です");
  EXPECT_EQ(clean("詳細はhttps://example.com/xを参照"), "詳細はを参照");
}

TEST_F(CleanTextTest, SqueezesLongRuns) {
  EXPECT_EQ(clean("痛いーーーーー"), "痛いーーー");
  EXPECT_EQ(clean("ああああああ"), "あああ");
}

TEST_F(CleanTextTest, DropsCharactersOutsideWhitelist) {
  EXPECT_FALSE(cfg.is_whitelisted(U'😀'));
  EXPECT_EQ(clean("薬😀"), "薬");
}

TEST_F(CleanTextTest, EmptyInput) { EXPECT_EQ(clean(""), ""); }

TEST(CleaningRules, PunctuationRuleMustPrecedeNfkc) {
  EXPECT_EQ(rules::nfkc(rules::fullwidth_punctuation("．，")), "。、");
  EXPECT_EQ(rules::fullwidth_punctuation(rules::nfkc("．，")), ".,");
}

TEST(CleaningRules, RestorationMustFollowNfkc) {
  EXPECT_EQ(rules::nfkc(rules::restore_symbols("…")), "...");
  EXPECT_EQ(rules::restore_symbols(rules::nfkc("…")), "…");
}

TEST(CleaningRules, CountsReplacements) {
  std::int64_t n = 0;
  rules::to_meta_space("a b c", &n);
  EXPECT_EQ(n, 2);
}

TEST(CleaningProperty, Idempotent) {
  const auto cfg = CleaningConfig::defaults();
  const TextCleaner cleaner(cfg);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::uint32_t> cp(0x20, 0x9FFF);
  std::uniform_int_distribution<int> len(0, 24);
  const std::u32string tricky = U" 　．，...°C@:/-ー~０Ａ\n";
  std::uniform_int_distribution<size_t> tp(0, tricky.size() - 1);
  for (int i = 0; i < 1500; ++i) {
    std::u32string s;
    for (int k = len(rng); k > 0; --k) {
      const auto c = cp(rng);
      s += (c % 3 == 0) ? tricky[tp(rng)] : static_cast<char32_t>(c >= 0xD800 ? 0x3042 : c);
    }
    const auto once = cleaner.clean(unicode::encode_utf8(s));
    ASSERT_EQ(cleaner.clean(once), once) << unicode::encode_utf8(s);
  }
}

TEST(CleaningProperty, OutputIsWhitelisted) {
  const auto cfg = CleaningConfig::defaults();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::uint32_t> cp(0x20, 0xFFEF);
  for (int i = 0; i < 500; ++i) {
    std::u32string s;
    for (int k = 0; k < 16; ++k) {
      const auto c = cp(rng);
      if (c < 0xD800 || c > 0xDFFF) s += static_cast<char32_t>(c);
    }
    for (char32_t c : unicode::decode_utf8(clean_text(unicode::encode_utf8(s), cfg))) {
      ASSERT_TRUE(c == U'\n' || c == U'▁' || cfg.is_whitelisted(c)) << static_cast<std::uint32_t>(c);
    }
  }
}

TEST(CleaningConfig, ValidateRejectsBadValues) {
  auto cfg = CleaningConfig::defaults();
  cfg.max_repeat_run = 0;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = CleaningConfig::defaults();
  cfg.incomplete_sentence_threshold = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = CleaningConfig::defaults();
  cfg.charset_whitelist.push_back({0x50, 0x40});
  EXPECT_THROW(cfg.validate(), Error);
  cfg = CleaningConfig::defaults();
  cfg.symbol_unification_map = {{"a", "b"}, {"b", "a"}};
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(DocumentFilter, RejectsBlockedEmptyAndFragmented) {
  const TextCleaner cleaner(CleaningConfig::defaults());
  const auto blocked = clean_document({"a", Source::kWeb, "無修正の動画です。"}, cleaner);
  EXPECT_EQ(filter_document(blocked, cleaner), RejectReason::kBlockedTerm);
  const auto empty = clean_document({"b", Source::kWeb, "😀😀"}, cleaner);
  EXPECT_EQ(filter_document(empty, cleaner), RejectReason::kEmpty);
  const auto frag = clean_document({"c", Source::kWeb, "途中で\n切れた\n文章\nばかり。"}, cleaner);
  EXPECT_EQ(filter_document(frag, cleaner), RejectReason::kIncompleteSentences);
  const auto good = clean_document({"d", Source::kWiki, "高血圧は多い。治療は大切です。"}, cleaner);
  EXPECT_EQ(filter_document(good, cleaner), std::nullopt);
}

TEST(Dedup, FirstOccurrenceWinsAndReportBalances) {
  std::vector<CleanDocument> docs = {
      {"a", Source::kWeb, "同じ文書です。", {}},
      {"b", Source::kWeb, "別の文書です。", {}},
      {"c", Source::kWeb, "同じ文書です。", {}},
  };
  const auto r = dedup_corpus(docs, 5);
  ASSERT_EQ(r.docs.size(), 2u);
  EXPECT_EQ(r.docs[0].id, "a");
  EXPECT_EQ(r.docs[1].id, "b");
  EXPECT_EQ(r.report.rejected.at("duplicate"), 1);
  EXPECT_TRUE(r.report.balanced());
}

TEST(Dedup, RemovesOverRepeatedSentences) {
  std::vector<CleanDocument> docs;
  for (int i = 0; i < 4; ++i) {
    docs.push_back({"d" + std::to_string(i), Source::kWeb,
                    "無断転用を禁じます。本文" + std::to_string(i) + "です。", {}});
  }
  const auto r = dedup_corpus(docs, 2);
  ASSERT_EQ(r.docs.size(), 4u);
  for (const auto& d : r.docs) EXPECT_EQ(d.text.find("無断転用"), std::string::npos) << d.text;
  EXPECT_EQ(r.report.sentences_removed, 4);
  EXPECT_TRUE(r.report.balanced());
}

TEST(SplitSentences, LosslessConcatenation) {
  const std::string text = "一文目。二文目！三\n四文目？残り";
  std::string joined;
  for (auto s : split_sentences(text)) joined += s;
  EXPECT_EQ(joined, text);
  EXPECT_EQ(split_sentences(text).size(), 5u);
}

}  // namespace
}  // namespace slm::clean
