#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <thread>

#include "nphead/error.hpp"
#include "nphead/evalsvc.hpp"
#include "nphead/evalsvc_http.hpp"
#include "testutil.hpp"

using namespace nphead;
using namespace nphead::evalsvc;

namespace {

const std::vector<std::string> kModels{"4bit quantized mBART+LoRA", "8bit quantized mBART+LoRA", "mBART+LoRA",
                                       "mT5+LoRA",                  "4bit quantized mT5+LoRA",   "8bit quantized mT5+LoRA"};

std::vector<ItemInput> items(std::size_t n, std::size_t n_models = 6) {
    std::vector<ItemInput> out;
    for (std::size_t i = 0; i < n; ++i) {
        ItemInput in;
        in.source = "समाचार " + std::to_string(i);
        for (std::size_t m = 0; m < n_models; ++m) in.outputs.push_back({kModels[m], "शीर्षक " + std::to_string(i * 10 + m)});
        out.push_back(std::move(in));
    }
    return out;
}

std::string rater(int i) { return "rater-token-" + std::string(8, static_cast<char>('a' + i % 26)) + std::to_string(i); }

std::string key_for(const EvalItem& item, const std::string& model) {
    for (const auto& [k, m] : item.key_to_model)
        if (m == model) return k;
    return {};
}

void expect_blind(const std::string& payload) {
    for (const auto& m : kModels) EXPECT_EQ(payload.find(m), std::string::npos) << m;
    for (const char* frag : {"mBART", "mT5", "LoRA", "quantized", "key_to_model", "models"})
        EXPECT_EQ(payload.find(frag), std::string::npos) << frag;
}

}  // namespace

TEST(Aggregate, HumanEvaluationTable) {
    const auto a = aggregate_counts(kModels, {235, 191, 164, 100, 0, 0});
    EXPECT_EQ(a.total, 690u);
    const std::vector<std::string> want{"34.06", "27.68", "23.77", "14.49", "0.00", "0.00"};
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(a.percentage(i), want[i]);
    const auto j = to_json(a);
    EXPECT_EQ(j.at("rows").at(0).at("percentage"), "34.06");
    EXPECT_EQ(j.at("rows").at(0).at("model"), "4bit quantized mBART+LoRA");
}

TEST(Aggregate, RoundingMatchesIntegerOracle) {
    Rng rng(1);
    for (int t = 0; t < 20000; ++t) {
        const auto total = static_cast<std::size_t>(rng.uniform_int(1, 100000));
        const auto count = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total)));
        const std::size_t q = 10000 * count / total, r = 10000 * count % total;
        ASSERT_EQ(percent_hundredths(count, total), static_cast<long>(q + (2 * r >= total ? 1 : 0))) << count << "/" << total;
    }
    EXPECT_EQ(percent_hundredths(1, 8), 1250);  // exact
    EXPECT_EQ(percent_hundredths(1, 3), 3333);
    EXPECT_EQ(percent_hundredths(2, 3), 6667);
    EXPECT_EQ(percent_hundredths(1, 80000), 0);
    EXPECT_EQ(percent_hundredths(1, 20000), 1);  // 0.005 rounds up
    EXPECT_EQ(percent_hundredths(0, 0), 0);
}

TEST(Session, ShuffledBlindedAndDeterministic) {
    const auto a = build_session(items(10), 5);
    const auto b = build_session(items(10), 5);
    EXPECT_EQ(a.session_id, b.session_id);
    EXPECT_EQ(a.models, kModels);
    std::set<std::vector<std::string>> orders;
    for (std::size_t i = 0; i < a.items.size(); ++i) {
        EXPECT_EQ(a.items[i].key_to_model, b.items[i].key_to_model);
        std::vector<std::string> order;
        for (const auto& o : a.items[i].options) order.push_back(a.items[i].key_to_model.at(o.key));
        orders.insert(order);
        EXPECT_EQ(a.items[i].options.front().key, "A");
        EXPECT_EQ(a.items[i].options.back().key, "F");
    }
    EXPECT_GT(orders.size(), 1u);
    EXPECT_NE(build_session(items(10), 6).session_id, a.session_id);
    expect_blind(rater_view(a).dump());
}

TEST(Session, BlindingHoldsOverRandomSessions) {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        const auto n_models = static_cast<std::size_t>(rng.uniform_int(2, 6));
        const auto s = build_session(items(static_cast<std::size_t>(rng.uniform_int(1, 12)), n_models), rng.next());
        expect_blind(rater_view(s).dump());
        expect_blind(rater_view(session_from_json(to_json(s))).dump());
    }
}

TEST(Session, ValidationErrors) {
    EXPECT_THROW(build_session({}, 1), ValidationError);
    auto bad = items(2);
    bad[1].outputs.pop_back();
    EXPECT_THROW(build_session(bad, 1), ValidationError);
    bad = items(1, 2);
    bad[0].outputs[1].model = bad[0].outputs[0].model;
    EXPECT_THROW(build_session(bad, 1), ValidationError);
    EXPECT_THROW(build_session(items(1, 1), 1), ValidationError);
}

TEST(Votes, LatestVoteWinsAndCountsAreConserved) {
    const auto s = build_session(items(10), 2);
    std::vector<VoteRecord> votes;
    std::map<std::pair<std::string, std::string>, std::string> latest;
    Rng rng(4);
    for (int i = 0; i < 500; ++i) {
        const auto& item = s.items[static_cast<std::size_t>(rng.uniform_int(0, 9))];
        const auto r = rater(static_cast<int>(rng.uniform_int(0, 20)));
        const auto key = option_key(static_cast<std::size_t>(rng.uniform_int(0, 5)));
        votes.push_back({s.session_id, item.item_id, r, key, ""});
        latest[{r, item.item_id}] = item.key_to_model.at(key);
    }
    const auto a = fold_votes(s, votes);
    EXPECT_EQ(a.total, latest.size());
    std::map<std::string, std::size_t> want;
    for (const auto& [k, m] : latest) ++want[m];
    for (std::size_t i = 0; i < a.models.size(); ++i) EXPECT_EQ(a.counts[i], want[a.models[i]]);
}

TEST(Votes, SupersedingVoteMovesTheCount) {
    const auto s = build_session(items(1), 2);
    const auto& it = s.items[0];
    const auto first = key_for(it, "mT5+LoRA"), second = key_for(it, "mBART+LoRA");
    const auto a = fold_votes(s, {{s.session_id, it.item_id, rater(1), first, ""}, {s.session_id, it.item_id, rater(1), second, ""}});
    EXPECT_EQ(a.total, 1u);
    EXPECT_EQ(a.counts[2], 1u);
    EXPECT_EQ(a.counts[3], 0u);
}

TEST(Votes, TruncatedLogAtEveryByteFoldsTheSurvivingPrefix) {
    const auto s = build_session(items(4), 9);
    std::string log;
    std::vector<std::size_t> ends;
    Rng rng(5);
    for (int i = 0; i < 30; ++i) {
        const auto& it = s.items[static_cast<std::size_t>(rng.uniform_int(0, 3))];
        log += to_json(VoteRecord{s.session_id, it.item_id, rater(i % 7), option_key(static_cast<std::size_t>(rng.uniform_int(0, 5))), "t"}).dump() + "\n";
        ends.push_back(log.size());
    }
    const auto all = parse_vote_log(log);
    for (std::size_t cut = 0; cut <= log.size(); ++cut) {
        const auto complete = static_cast<std::size_t>(std::upper_bound(ends.begin(), ends.end(), cut) - ends.begin());
        const auto votes = parse_vote_log(log.substr(0, cut));
        ASSERT_EQ(votes.size(), complete) << "cut " << cut;
        const auto a = fold_votes(s, votes);
        const auto b = fold_votes(s, std::vector<VoteRecord>(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(complete)));
        ASSERT_EQ(a.counts, b.counts);
        ASSERT_EQ(a.hundredths, b.hundredths);
    }
    auto corrupt = log;
    corrupt[ends[2] + 3] = '#';
    EXPECT_THROW(parse_vote_log(corrupt), IntegrityError);
}

TEST(Store, PersistsAndRejectsBadVotes) {
    const auto dir = testutil::temp_dir("store");
    std::string id;
    {
        SessionStore store(dir);
        const auto s = store.create(items(3), 1);
        id = s.session_id;
        EXPECT_EQ(store.create(items(3), 1).session_id, id);
        const auto& it = s.items[0];
        store.record_vote(id, it.item_id, rater(1), key_for(it, "mBART+LoRA"));
        EXPECT_THROW(store.record_vote(id, it.item_id, "short", "A"), ValidationError);
        EXPECT_THROW(store.record_vote(id, "item-99", rater(1), "A"), NotFoundError);
        EXPECT_THROW(store.record_vote(id, it.item_id, rater(1), "Z"), ValidationError);
        EXPECT_THROW(store.get("0123456789abcdef"), NotFoundError);
        EXPECT_THROW(store.get("../../etc/passwd"), NotFoundError);
    }
    SessionStore reopened(dir);
    const auto a = reopened.aggregate(id);
    EXPECT_EQ(a.total, 1u);
    EXPECT_EQ(a.counts[2], 1u);
}

TEST(Store, ConcurrentVotesAreAllRecorded) {
    SessionStore store(testutil::temp_dir("store-mt"));
    const auto s = store.create(items(10), 3);
    std::vector<std::thread> threads;
    for (int t = 0; t < 8; ++t) {
        threads.emplace_back([&, t] {
            for (const auto& it : s.items) store.record_vote(s.session_id, it.item_id, rater(t), "A");
        });
    }
    for (auto& th : threads) th.join();
    EXPECT_EQ(store.aggregate(s.session_id).total, 80u);
}

TEST(Tokens, IssuedTokensAreValidAndDistinct) {
    std::set<std::string> seen;
    for (int i = 0; i < 100; ++i) {
        const auto t = issue_rater_token();
        EXPECT_TRUE(valid_rater_token(t));
        seen.insert(t);
    }
    EXPECT_EQ(seen.size(), 100u);
    EXPECT_FALSE(valid_rater_token("has space in it!!"));
    EXPECT_FALSE(valid_rater_token(std::string(65, 'a')));
}

TEST(Http, RaterFlowAndAdminEndpoints) {
    SessionStore store(testutil::temp_dir("http"));
    EvalServer server(store, "s3cret");
    const int port = server.bind_any();
    ASSERT_GT(port, 0);
    std::thread loop([&] { server.run(); });
    server.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);

    auto health = cli.Get("/healthz");
    ASSERT_TRUE(health);
    EXPECT_EQ(health->status, 200);

    nlohmann::json body{{"seed", 11}, {"items", nlohmann::json::array()}};
    for (const auto& in : items(10)) {
        nlohmann::json outs = nlohmann::json::array();
        for (const auto& o : in.outputs) outs.push_back({{"model", o.model}, {"summary", o.summary}});
        body["items"].push_back({{"source", in.source}, {"outputs", outs}});
    }
    EXPECT_EQ(cli.Post("/sessions", body.dump(), "application/json")->status, 401);
    httplib::Headers admin{{"X-Admin-Secret", "s3cret"}};
    auto created = cli.Post("/sessions", admin, body.dump(), "application/json");
    ASSERT_EQ(created->status, 201);
    const std::string id = nlohmann::json::parse(created->body).at("session_id");

    auto tok = cli.Post("/raters");
    ASSERT_EQ(tok->status, 201);
    const std::string rater_id = nlohmann::json::parse(tok->body).at("rater_id");
    expect_blind(tok->body);

    auto view = cli.Get("/sessions/" + id);
    ASSERT_EQ(view->status, 200);
    expect_blind(view->body);
    const auto vj = nlohmann::json::parse(view->body);
    ASSERT_EQ(vj.at("items").size(), 10u);
    EXPECT_NE(view->body.find("शीर्षक"), std::string::npos);

    // scripted choices: option A for even items, option F for odd
    const auto session = store.get(id);
    std::map<std::string, std::size_t> expect;
    for (std::size_t i = 0; i < 10; ++i) {
        const auto& item = vj.at("items").at(i);
        ASSERT_EQ(item.at("options").size(), 6u);
        const std::string key = i % 2 ? "F" : "A";
        auto r = cli.Post("/sessions/" + id + "/votes",
                          nlohmann::json{{"rater_id", rater_id}, {"item_id", item.at("item_id")}, {"option_key", key}}.dump(),
                          "application/json");
        ASSERT_EQ(r->status, 201);
        expect_blind(r->body);
        ++expect[session.items[i].key_to_model.at(key)];
    }
    EXPECT_EQ(cli.Get("/sessions/" + id + "/aggregate")->status, 401);
    auto agg = cli.Get("/sessions/" + id + "/aggregate", admin);
    ASSERT_EQ(agg->status, 200);
    const auto aj = nlohmann::json::parse(agg->body);
    EXPECT_EQ(aj.at("total"), 10);
    for (const auto& row : aj.at("rows")) EXPECT_EQ(row.at("votes").get<std::size_t>(), expect[row.at("model")]);

    EXPECT_EQ(cli.Get("/sessions/0000000000000000")->status, 404);
    EXPECT_EQ(cli.Post("/sessions/" + id + "/votes", "{not json", "application/json")->status, 400);
    EXPECT_EQ(cli.Post("/sessions/" + id + "/votes",
                       nlohmann::json{{"rater_id", rater_id}, {"item_id", "item-1"}, {"option_key", "Q"}}.dump(),
                       "application/json")
                  ->status,
              400);
    server.stop();
    loop.join();
}
